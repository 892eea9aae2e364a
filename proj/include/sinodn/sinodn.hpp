#ifndef SINODN_SINODN_HPP
#define SINODN_SINODN_HPP

// Umbrella header.

#include "sinodn/blind_spot.hpp"
#include "sinodn/bm3d.hpp"
#include "sinodn/dataset.hpp"
#include "sinodn/error.hpp"
#include "sinodn/gaussian.hpp"
#include "sinodn/grid.hpp"
#include "sinodn/harness.hpp"
#include "sinodn/metrics.hpp"
#include "sinodn/phantom.hpp"
#include "sinodn/reconstruct.hpp"
#include "sinodn/stf.hpp"

#endif
