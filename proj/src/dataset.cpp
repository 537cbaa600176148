#include "splattrack/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "splattrack/errors.hpp"

namespace fs = std::filesystem;

namespace splattrack {

std::string frame_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d%s", index, ext);
  return buf;
}

void save_pose_txt(const Pose& pose, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f.precision(17);
  const Mat4 m = pose.matrix();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) f << m(r, c) << (c == 3 ? "\n" : " ");
  }
}

Pose load_pose_txt(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      if (!(f >> m(r, c))) throw IoError("bad pose file " + path);
  return Pose::from_matrix(m);
}

namespace {

template <typename ImgT>
cv::Mat color_to_bgr8(const ImgT& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      auto& px = m.at<cv::Vec3b>(y, x);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(static_cast<double>(img.at(x, y, ch)), 0.0, 1.0);
        px[2 - ch] = static_cast<uchar>(std::lround(v * 255.0));
      }
    }
  }
  return m;
}

template <typename ImgT>
cv::Mat depth_to_u16(const ImgT& depth) {
  cv::Mat m(depth.height, depth.width, CV_16UC1);
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) {
      const double mm = std::clamp(static_cast<double>(depth.at(x, y)) * 1000.0, 0.0, 65535.0);
      m.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(std::lround(mm));
    }
  }
  return m;
}

void imwrite_or_throw(const std::string& path, const cv::Mat& m) {
  if (!cv::imwrite(path, m)) throw IoError("cannot write " + path);
}

}  // namespace

void save_png_color(const ImageF3& img, const std::string& path) {
  imwrite_or_throw(path, color_to_bgr8(img));
}
void save_png_color(const ImageD3& img, const std::string& path) {
  imwrite_or_throw(path, color_to_bgr8(img));
}
void save_png_depth_mm(const ImageF& depth, const std::string& path) {
  imwrite_or_throw(path, depth_to_u16(depth));
}
void save_png_depth_mm(const ImageD& depth, const std::string& path) {
  imwrite_or_throw(path, depth_to_u16(depth));
}
void save_png_mask(const ImageU8& mask, const std::string& path) {
  cv::Mat m(mask.height, mask.width, CV_8UC1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      m.at<uchar>(y, x) = mask.at(x, y) ? 255 : 0;
  imwrite_or_throw(path, m);
}

void save_dataset(const SyntheticScene& scene, const std::string& dir) {
  for (const char* sub : {"", "/rgb", "/depth", "/mask", "/gt_pose"})
    fs::create_directories(dir + sub);

  {
    std::ofstream f(dir + "/cam_K.txt");
    if (!f) throw IoError("cannot write cam_K.txt");
    f.precision(17);
    const Camera& k = scene.intrinsics;
    f << k.fx << " 0 " << k.cx << "\n0 " << k.fy << " " << k.cy << "\n0 0 1\n";
  }
  for (size_t i = 0; i < scene.frames.size(); ++i) {
    const Frame& fr = *scene.frames[i];
    const std::string n = frame_name(static_cast<int>(i));
    save_png_color(fr.rgb, dir + "/rgb/" + n);
    save_png_depth_mm(fr.depth, dir + "/depth/" + n);
    save_png_mask(fr.mask, dir + "/mask/" + n);
    save_pose_txt(scene.gt[i], dir + "/gt_pose/" + frame_name(static_cast<int>(i), ".txt"));
  }
  if (!scene.model_points.empty()) save_points_xyz(scene.model_points, dir + "/model.xyz");
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  {
    std::ifstream f(dir + "/cam_K.txt");
    if (!f) throw IoError("missing cam_K.txt in " + dir);
    double k[9];
    for (double& v : k)
      if (!(f >> v)) throw IoError("bad cam_K.txt in " + dir);
    ds.intrinsics.fx = k[0];
    ds.intrinsics.cx = k[2];
    ds.intrinsics.fy = k[4];
    ds.intrinsics.cy = k[5];
  }
  for (int i = 0;; ++i) {
    const std::string rgb_path = dir + "/rgb/" + frame_name(i);
    if (!fs::exists(rgb_path)) break;
    cv::Mat rgb = cv::imread(rgb_path, cv::IMREAD_COLOR);
    cv::Mat depth = cv::imread(dir + "/depth/" + frame_name(i), cv::IMREAD_UNCHANGED);
    cv::Mat mask = cv::imread(dir + "/mask/" + frame_name(i), cv::IMREAD_GRAYSCALE);
    if (rgb.empty() || depth.empty() || mask.empty() || depth.type() != CV_16UC1)
      throw IoError("bad frame " + std::to_string(i) + " in " + dir);

    auto frame = std::make_shared<Frame>();
    frame->timestamp = i;
    frame->rgb = ImageF3(rgb.cols, rgb.rows);
    frame->depth = ImageF(rgb.cols, rgb.rows);
    frame->mask = ImageU8(rgb.cols, rgb.rows);
    for (int y = 0; y < rgb.rows; ++y) {
      for (int x = 0; x < rgb.cols; ++x) {
        const auto& px = rgb.at<cv::Vec3b>(y, x);
        for (int ch = 0; ch < 3; ++ch)
          frame->rgb.at(x, y, ch) = static_cast<float>(px[2 - ch]) / 255.0f;
        frame->depth.at(x, y) = static_cast<float>(depth.at<std::uint16_t>(y, x)) / 1000.0f;
        frame->mask.at(x, y) = mask.at<uchar>(y, x) ? 255 : 0;
      }
    }
    ds.intrinsics.width = rgb.cols;
    ds.intrinsics.height = rgb.rows;
    frame->intrinsics = ds.intrinsics;
    ds.frames.push_back(std::move(frame));

    const std::string gt_path = dir + "/gt_pose/" + frame_name(i, ".txt");
    if (fs::exists(gt_path))
      ds.gt.push_back(load_pose_txt(gt_path));
    else
      ds.gt.push_back(std::nullopt);
  }
  if (ds.frames.empty()) throw IoError("no frames in " + dir);
  if (fs::exists(dir + "/model.xyz")) ds.model_points = load_points(dir + "/model.xyz");
  return ds;
}

}  // namespace splattrack
