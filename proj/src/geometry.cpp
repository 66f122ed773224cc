#include "stvla/geometry.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace stvla {

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      r(i, j) = (*this)(i, 0) * o(0, j) + (*this)(i, 1) * o(1, j) + (*this)(i, 2) * o(2, j);
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
  return r;
}

double Mat3::det() const {
  const auto& a = m;
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

Mat3 rotation_from_quaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 0.0)) throw std::invalid_argument("rotation_from_quaternion: zero quaternion");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Mat3 r;
  r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
         2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  return r;
}

Mat3 rotation_from_axis_angle(const Vec3& aa) {
  const double angle = norm(aa);
  if (angle == 0.0) return Mat3::identity();
  const Vec3 k = aa / angle;
  const double c = std::cos(angle), s = std::sin(angle), v = 1.0 - c;
  Mat3 r;
  r.m = {k.x * k.x * v + c,       k.x * k.y * v - k.z * s, k.x * k.z * v + k.y * s,
         k.y * k.x * v + k.z * s, k.y * k.y * v + c,       k.y * k.z * v - k.x * s,
         k.z * k.x * v - k.y * s, k.z * k.y * v + k.x * s, k.z * k.z * v + c};
  return r;
}

Vec3 axis_angle_from_rotation(const Mat3& r) {
  const double tr = r(0, 0) + r(1, 1) + r(2, 2);
  const double c = std::clamp((tr - 1.0) * 0.5, -1.0, 1.0);
  const double angle = std::acos(c);
  const Vec3 w{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
  if (angle < 1e-12) return w * 0.5;
  if (M_PI - angle < 1e-6) {
    // near pi: axis from the symmetric part
    Vec3 axis{std::sqrt(std::max(0.0, (r(0, 0) + 1) * 0.5)), std::sqrt(std::max(0.0, (r(1, 1) + 1) * 0.5)),
              std::sqrt(std::max(0.0, (r(2, 2) + 1) * 0.5))};
    if (r(0, 1) < 0) axis.y = -axis.y;
    if (r(0, 2) < 0) axis.z = -axis.z;
    return axis * (angle / norm(axis));
  }
  return w * (angle / (2.0 * std::sin(angle)));
}

Mat3 rotation_z(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 r;
  r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
  return r;
}

Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& world_up) {
  const Vec3 fwd = (target - eye) / norm(target - eye);
  Vec3 right = cross(fwd, world_up);
  const double rn = norm(right);
  if (rn < 1e-12) throw std::invalid_argument("look_at_rotation: forward parallel to up");
  right = right / rn;
  const Vec3 down = cross(fwd, right);
  Mat3 r;  // rows are the camera axes expressed in world coordinates
  r.m = {right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
  return r;
}

double orthonormality_error(const Mat3& r) {
  const Mat3 rtr = r.transposed() * r;
  double err = std::abs(r.det() - 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) err = std::max(err, std::abs(rtr(i, j) - (i == j ? 1.0 : 0.0)));
  return err;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("CameraIntrinsics: focal lengths must be positive");
}

CameraPose CameraPose::from_center(const Mat3& r, const Vec3& center) {
  CameraPose p;
  p.rotation = r;
  p.translation = (r * center) * -1.0;
  return p;
}

Vec3 CameraPose::center() const { return (rotation.transposed() * translation) * -1.0; }

void CameraPose::validate() const {
  if (orthonormality_error(rotation) > 1e-9) throw std::invalid_argument("CameraPose: rotation is not orthonormal");
}

WorldPoint unproject_pixel(PixelCoord p2d, double depth, const CameraIntrinsics& k, const CameraPose& pose) {
  if (!(depth > 0.0) || !std::isfinite(depth)) throw std::domain_error("unproject_pixel: invalid depth");
  const Vec3 cam{(p2d.u - k.cx) / k.fx * depth, (p2d.v - k.cy) / k.fy * depth, depth};
  return pose.rotation.transposed() * (cam - pose.translation);
}

Projection project_point(const WorldPoint& p, const CameraIntrinsics& k, const CameraPose& pose) {
  const Vec3 cam = pose.rotation * p + pose.translation;
  if (!(cam.z > 0.0)) throw std::domain_error("project_point: point is behind camera");
  return {{cam.x / cam.z * k.fx + k.cx, cam.y / cam.z * k.fy + k.cy}, cam.z};
}

std::vector<WorldPoint> unproject_patch_centers(const DepthMap& depth, const CameraIntrinsics& k,
                                                const CameraPose& pose, PatchGrid grid) {
  if (grid.rows == 0 || grid.cols == 0 || depth.height % grid.rows != 0 || depth.width % grid.cols != 0)
    throw std::invalid_argument("unproject_patch_centers: patch grid " + std::to_string(grid.rows) + "x" +
                                std::to_string(grid.cols) + " does not divide " + std::to_string(depth.width) +
                                "x" + std::to_string(depth.height));
  const std::size_t ph = depth.height / grid.rows, pw = depth.width / grid.cols;
  std::vector<WorldPoint> out;
  out.reserve(grid.rows * grid.cols);
  for (std::size_t pr = 0; pr < grid.rows; ++pr) {
    for (std::size_t pc = 0; pc < grid.cols; ++pc) {
      double total = 0.0;
      std::size_t valid = 0;
      for (std::size_t r = pr * ph; r < (pr + 1) * ph; ++r)
        for (std::size_t c = pc * pw; c < (pc + 1) * pw; ++c) {
          const double d = depth.at(c, r);
          if (d > 0.0) {
            total += d;
            ++valid;
          }
        }
      if (valid == 0)
        throw std::domain_error("unproject_patch_centers: empty patch (" + std::to_string(pr) + "," +
                                std::to_string(pc) + ")");
      const PixelCoord center{static_cast<double>(pc * pw) + 0.5 * static_cast<double>(pw),
                              static_cast<double>(pr * ph) + 0.5 * static_cast<double>(ph)};
      out.push_back(unproject_pixel(center, total / static_cast<double>(valid), k, pose));
    }
  }
  return out;
}

}  // namespace stvla
