#pragma once

// Dense real parameter vector shared by the server, the clients and the
// channel model. Value type; arithmetic is element-wise and checks lengths.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace noisyfed {

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  ParamVector(std::initializer_list<double> values) : values_(values) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  [[nodiscard]] std::span<double> span() noexcept { return values_; }
  [[nodiscard]] std::span<const double> span() const noexcept { return values_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return values_; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  ParamVector& operator+=(const ParamVector& other) {
    check_same_size(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& other) {
    check_same_size(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
    return *this;
  }
  ParamVector& operator*=(double s) noexcept {
    for (double& v : values_) v *= s;
    return *this;
  }

  /// this += s * other
  ParamVector& add_scaled(const ParamVector& other, double s) {
    check_same_size(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * other.values_[i];
    return *this;
  }

  [[nodiscard]] double dot(const ParamVector& other) const {
    check_same_size(other);
    double acc = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * other.values_[i];
    return acc;
  }
  [[nodiscard]] double squared_norm() const noexcept {
    double acc = 0.0;
    for (double v : values_) acc += v * v;
    return acc;
  }
  [[nodiscard]] double norm() const noexcept { return std::sqrt(squared_norm()); }

  [[nodiscard]] bool all_finite() const noexcept {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  void check_same_size(const ParamVector& other) const {
    if (other.size() != size())
      throw std::invalid_argument("ParamVector: length mismatch (" + std::to_string(size()) +
                                  " vs " + std::to_string(other.size()) + ")");
  }

  std::vector<double> values_;
};

inline ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
inline ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
inline ParamVector operator*(double s, ParamVector a) { return a *= s; }

inline void require_finite(const ParamVector& v, const char* what) {
  if (!v.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite entry");
}

}  // namespace noisyfed
