#ifndef SINODN_FFT_HPP
#define SINODN_FFT_HPP

// Thin RAII layer over FFTW (double precision). Planning is serialised
// through a mutex because the FFTW planner is not re-entrant; execution with
// new-array functions is thread-safe.

#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <vector>

#include <fftw3.h>

namespace sinodn::fft {

namespace detail {

inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct PlanDeleter {
  void operator()(fftw_plan p) const {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(p);
  }
};
using PlanHandle = std::unique_ptr<std::remove_pointer_t<fftw_plan>, PlanDeleter>;

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

} // namespace detail

template <class T>
using AlignedBuffer = std::unique_ptr<T[], detail::FftwFree>;

template <class T>
AlignedBuffer<T> make_buffer(std::size_t n) {
  return AlignedBuffer<T>(static_cast<T*>(fftw_malloc(sizeof(T) * (n ? n : 1))));
}

/// Real-to-complex / complex-to-real pair for a fixed 1D or 2D shape.
/// Unnormalised: backward(forward(x)) = N * x.
class RealPlan {
public:
  /// 1D transform of length n.
  explicit RealPlan(std::size_t n) : RealPlan(1, n) {}

  /// 2D transform over a rows x cols row-major array (rows == 1 for 1D).
  RealPlan(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), spectrum_cols_(cols / 2 + 1),
        real_(make_buffer<double>(rows * cols)),
        spec_(make_buffer<fftw_complex>(rows * spectrum_cols_)) {
    std::lock_guard lock(detail::planner_mutex());
    if (rows == 1) {
      forward_.reset(fftw_plan_dft_r2c_1d(int(cols), real_.get(), spec_.get(), FFTW_ESTIMATE));
      backward_.reset(fftw_plan_dft_c2r_1d(int(cols), spec_.get(), real_.get(), FFTW_ESTIMATE));
    } else {
      forward_.reset(fftw_plan_dft_r2c_2d(int(rows), int(cols), real_.get(), spec_.get(), FFTW_ESTIMATE));
      backward_.reset(fftw_plan_dft_c2r_2d(int(rows), int(cols), spec_.get(), real_.get(), FFTW_ESTIMATE));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t spectrum_cols() const { return spectrum_cols_; }

  double* real() { return real_.get(); }
  std::complex<double>* spectrum() { return reinterpret_cast<std::complex<double>*>(spec_.get()); }

  void forward() { fftw_execute(forward_.get()); }
  /// Overwrites real() from spectrum(); the spectrum buffer is destroyed.
  void backward() { fftw_execute(backward_.get()); }

private:
  std::size_t rows_, cols_, spectrum_cols_;
  AlignedBuffer<double> real_;
  AlignedBuffer<fftw_complex> spec_;
  detail::PlanHandle forward_, backward_;
};

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n)
    p <<= 1;
  return p;
}

} // namespace sinodn::fft

#endif
