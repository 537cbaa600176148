#pragma once

#include <optional>
#include <string>
#include <vector>

#include "splattrack/frame.hpp"
#include "splattrack/scene.hpp"

namespace splattrack {

struct Dataset {
  std::vector<FramePtr> frames;
  Camera intrinsics;
  std::vector<std::optional<Pose>> gt;  // object-to-camera when available
  ModelPoints model_points;             // empty when no model file present
};

/// Directory layout: rgb/%06d.png (8-bit RGB), depth/%06d.png (16-bit
/// millimeters), mask/%06d.png, cam_K.txt, optional gt_pose/%06d.txt and
/// model.xyz.
void save_dataset(const SyntheticScene& scene, const std::string& dir);
Dataset load_dataset(const std::string& dir);

void save_pose_txt(const Pose& pose, const std::string& path);
Pose load_pose_txt(const std::string& path);

void save_png_color(const ImageF3& img, const std::string& path);
void save_png_color(const ImageD3& img, const std::string& path);
void save_png_depth_mm(const ImageF& depth, const std::string& path);
void save_png_depth_mm(const ImageD& depth, const std::string& path);
void save_png_mask(const ImageU8& mask, const std::string& path);

std::string frame_name(int index, const char* ext = ".png");

}  // namespace splattrack
