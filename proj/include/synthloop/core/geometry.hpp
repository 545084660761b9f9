#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

namespace synthloop {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
    friend Vec3 operator*(Vec3 a, double s) { return s * a; }
    friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) {
    const double n = norm(a);
    return n > 0 ? (1.0 / n) * a : a;
}

// Rotation about the world vertical (+z) axis, counterclockwise seen from above.
inline Vec3 rotate_z(Vec3 p, double degrees) {
    const double r = degrees * M_PI / 180.0;
    const double c = std::cos(r), s = std::sin(r);
    return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

// Axis-aligned box in pixel coordinates: (x, y) is the top-left corner.
struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    double area() const { return w > 0 && h > 0 ? w * h : 0.0; }
    double right() const { return x + w; }
    double bottom() const { return y + h; }
    bool degenerate() const { return !(w > 0) || !(h > 0); }
    friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
    const double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
    const double x1 = std::min(a.right(), b.right()), y1 = std::min(a.bottom(), b.bottom());
    return (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0.0;
}

inline std::optional<Box> clip(const Box& b, const Box& bounds) {
    const double x0 = std::max(b.x, bounds.x), y0 = std::max(b.y, bounds.y);
    const double x1 = std::min(b.right(), bounds.right()), y1 = std::min(b.bottom(), bounds.bottom());
    if (!(x1 > x0) || !(y1 > y0)) return std::nullopt;
    return Box{x0, y0, x1 - x0, y1 - y0};
}

}  // namespace synthloop
