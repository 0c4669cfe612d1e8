#pragma once

#include <stdexcept>
#include <string>

#include "crackkw/dual.hpp"

namespace crackkw {

/// Axis-aligned box in corner form.
template <class T>
struct BasicBox {
  T x1{}, y1{}, x2{}, y2{};

  T width() const { return x2 - x1; }
  T height() const { return y2 - y1; }
  T area() const { return width() * height(); }
  bool valid() const { return value_of(x1) < value_of(x2) && value_of(y1) < value_of(y2); }
};

using Box = BasicBox<double>;

inline std::string to_string(const Box& b) {
  return "(" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " +
         std::to_string(b.y2) + ")";
}

/// Throws unless width and height are positive.
inline const Box& require_valid(const Box& b) {
  if (!b.valid()) throw std::invalid_argument("degenerate box " + to_string(b));
  return b;
}

template <class T>
BasicBox<T> lift(const Box& b) {
  return {T(b.x1), T(b.y1), T(b.x2), T(b.y2)};
}

/// Intersection over union; 0 for disjoint boxes.
template <class T>
T iou(const BasicBox<T>& a, const BasicBox<T>& b) {
  const T iw = max_of(T(0.0), T(min_of(a.x2, b.x2) - max_of(a.x1, b.x1)));
  const T ih = max_of(T(0.0), T(min_of(a.y2, b.y2) - max_of(a.y1, b.y1)));
  const T inter = iw * ih;
  const T uni = a.area() + b.area() - inter;
  return inter / uni;
}

}  // namespace crackkw
