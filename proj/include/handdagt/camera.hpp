#pragma once

#include <array>
#include <cmath>

namespace hdagt {

// Pinhole intrinsics in pixels; camera at the origin looking down +z.
struct CameraIntrinsics {
  double fx = 1100.0;
  double fy = 1100.0;
  double cx = 63.5;
  double cy = 63.5;
};

// Maps hand-crop coordinates (unit cube, [-1,1]^3) to the camera frame:
// p_cam = center + radius * p_norm.
struct CropTransform {
  std::array<double, 3> center{0.0, 0.0, 2400.0};
  double radius = 120.0;

  std::array<double, 3> to_camera(const double* p) const {
    return {center[0] + radius * p[0], center[1] + radius * p[1],
            center[2] + radius * p[2]};
  }
  std::array<double, 3> to_normalized(const double* p) const {
    return {(p[0] - center[0]) / radius, (p[1] - center[1]) / radius,
            (p[2] - center[2]) / radius};
  }
};

inline void project_pixel(const CameraIntrinsics& cam, double x, double y,
                          double z, double& u, double& v) {
  u = cam.fx * x / z + cam.cx;
  v = cam.fy * y / z + cam.cy;
}

}  // namespace hdagt
