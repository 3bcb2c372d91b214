#pragma once

#include "glint/error.hpp"
#include "glint/math.hpp"

namespace glint {

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit
};

// Pinhole camera: x_cam = R * x_world + t.
struct Camera {
    Real fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Mat3 rotation;    // world-to-camera
    Vec3 translation; // world-to-camera

    void validate() const {
        require(fx > 0 && fy > 0, "camera_invalid", "focal lengths must be positive");
        require(width > 0 && height > 0, "camera_invalid", "image size must be positive");
        Mat3 rtr;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rtr(r, c) = dot(rotation.col(r), rotation.col(c));
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                require(std::abs(rtr(r, c) - (r == c ? 1.0 : 0.0)) < 1e-6,
                        "camera_invalid", "rotation is not orthonormal");
    }

    Vec3 position() const { return rotation.transposed() * (-translation); }

    Vec3 to_camera(const Vec3& p_world) const { return rotation * p_world + translation; }
    Vec3 to_world(const Vec3& p_cam) const { return rotation.transposed() * (p_cam - translation); }

    Vec3 dir_to_world(const Vec3& d_cam) const { return rotation.transposed() * d_cam; }
    Vec3 dir_to_camera(const Vec3& d_world) const { return rotation * d_world; }

    // Unit camera-space direction through the center of pixel (x, y).
    Vec3 pixel_dir_camera(Real x, Real y) const {
        return normalize(Vec3{(x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1.0});
    }

    Ray pixel_ray(Real x, Real y) const {
        return {position(), dir_to_world(pixel_dir_camera(x, y))};
    }

    // Projects a camera-space point (z > 0) to pixel coordinates.
    Vec2 project_camera(const Vec3& p_cam) const {
        return {fx * p_cam.x / p_cam.z + cx, fy * p_cam.y / p_cam.z + cy};
    }

    // Camera looking at `target` from `eye` with +y screen-down convention.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up_world,
                          Real fx, Real fy, int width, int height) {
        Camera cam;
        cam.fx = fx;
        cam.fy = fy;
        cam.cx = width / 2.0;
        cam.cy = height / 2.0;
        cam.width = width;
        cam.height = height;
        Vec3 fwd = normalize(target - eye);
        Vec3 right = normalize(cross(fwd, up_world));
        Vec3 down = cross(fwd, right);
        // Rows of world-to-camera rotation are the camera axes in world space.
        Mat3 r = Mat3::from_cols(right, down, fwd).transposed();
        cam.rotation = r;
        cam.translation = -(r * eye);
        return cam;
    }
};

}  // namespace glint
