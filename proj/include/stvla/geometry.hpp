#pragma once

// Pinhole camera model: pixel + depth -> world unprojection and its inverse.
//
// Pose convention: world -> camera, x_cam = R * x_world + t.
// Pixel coordinates are continuous; integer pixel (col i, row j) covers
// [i, i+1) x [j, j+1) and its center is (i + 0.5, j + 0.5).

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

namespace stvla {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  bool operator==(const Vec3&) const = default;
  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  double operator()(std::size_t r, std::size_t c) const { return m[r * 3 + c]; }
  double& operator()(std::size_t r, std::size_t c) { return m[r * 3 + c]; }
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const;
  Mat3 transposed() const;
  double det() const;
  bool operator==(const Mat3&) const = default;
};

// Rotation helpers (axis-angle vectors are rotation axis times angle in radians).
Mat3 rotation_from_quaternion(double w, double x, double y, double z);
Mat3 rotation_from_axis_angle(const Vec3& axis_angle);
Vec3 axis_angle_from_rotation(const Mat3& r);
Mat3 rotation_z(double yaw);
// Camera rotation (world -> camera) for a camera at `eye` looking at `target`;
// camera z points forward, camera y points image-down.
Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& world_up);
// Max deviation of RᵀR from I and of det(R) from 1.
double orthonormality_error(const Mat3& r);

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;

  void validate() const;
};

struct CameraPose {
  Mat3 rotation;     // world -> camera
  Vec3 translation;  // meters

  static CameraPose identity() { return {}; }
  // Pose of a camera centered at `center` with world->camera rotation `r`.
  static CameraPose from_center(const Mat3& r, const Vec3& center);
  Vec3 center() const;
  void validate() const;
};

using WorldPoint = Vec3;

struct PixelCoord {
  double u = 0.0, v = 0.0;
};

// Per-pixel depth in meters; 0 marks an invalid pixel.
struct DepthMap {
  std::size_t width = 0, height = 0;
  std::vector<double> values;  // row-major, height x width

  DepthMap() = default;
  DepthMap(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0.0) {}
  double at(std::size_t col, std::size_t row) const { return values[row * width + col]; }
  double& at(std::size_t col, std::size_t row) { return values[row * width + col]; }
};

struct Projection {
  PixelCoord pixel;
  double depth = 0.0;
};

WorldPoint unproject_pixel(PixelCoord p2d, double depth, const CameraIntrinsics& k, const CameraPose& pose);
Projection project_point(const WorldPoint& p, const CameraIntrinsics& k, const CameraPose& pose);

struct PatchGrid {
  std::size_t rows = 4, cols = 4;
};

// One world point per patch, row-major: the patch-center pixel unprojected at
// the mean valid depth of the patch.
std::vector<WorldPoint> unproject_patch_centers(const DepthMap& depth, const CameraIntrinsics& k,
                                                const CameraPose& pose, PatchGrid grid);

}  // namespace stvla
