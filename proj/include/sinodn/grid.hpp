#ifndef SINODN_GRID_HPP
#define SINODN_GRID_HPP

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "sinodn/error.hpp"

namespace sinodn {

/// Dense row-major 2D array. Rows are the slow axis (projection angle for
/// sinograms, image y for reconstructions).
template <class T>
class Grid {
public:
  using value_type = T;

  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Grid(std::size_t rows, std::size_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    detail::require(data_.size() == rows_ * cols_, "grid payload does not match its shape");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  const T& operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool same_shape(const Grid& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Grid&, const Grid&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Grid2d = Grid<double>;

template <class T>
bool all_finite(const Grid<T>& g) {
  return std::all_of(g.begin(), g.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
void require_same_shape(const Grid<T>& a, const Grid<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ConfigError(std::string(what) + ": grid shapes differ");
}

/// a*x + b*y, elementwise.
template <class T>
Grid<T> axpby(T a, const Grid<T>& x, T b, const Grid<T>& y) {
  require_same_shape(x, y, "axpby");
  Grid<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = a * x[i] + b * y[i];
  return out;
}

template <class T>
Grid<T> operator-(const Grid<T>& a, const Grid<T>& b) {
  return axpby(T(1), a, T(-1), b);
}

template <class T>
Grid<T> operator+(const Grid<T>& a, const Grid<T>& b) {
  return axpby(T(1), a, T(1), b);
}

template <class T>
std::pair<T, T> min_max(const Grid<T>& g) {
  auto [lo, hi] = std::minmax_element(g.begin(), g.end());
  return {*lo, *hi};
}

template <class T>
double mean(const Grid<T>& g) {
  double s = 0.0;
  for (T v : g)
    s += v;
  return g.empty() ? 0.0 : s / static_cast<double>(g.size());
}

template <class To, class From>
Grid<To> grid_cast(const Grid<From>& g) {
  std::vector<To> v(g.begin(), g.end());
  return Grid<To>(g.rows(), g.cols(), std::move(v));
}

} // namespace sinodn

#endif
