#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "vitedit/checkpoint.hpp"
#include "vitedit/rng.hpp"
#include "vitedit/vit.hpp"

namespace testsupport {

inline vitedit::ViTConfig toy_config() {
  vitedit::ViTConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.embed_dim = 64;
  cfg.num_heads = 4;
  cfg.head_dim = 16;
  cfg.depth = 6;
  cfg.mlp_hidden = 256;
  cfg.num_classes = 10;
  return cfg;
}

inline vitedit::Image random_image(const vitedit::ViTConfig& cfg, uint64_t seed) {
  vitedit::Rng rng(seed);
  vitedit::Image img = vitedit::Image::zero(cfg);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = rng.normal();
  return img;
}

// Scratch directory for file-based tests.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("vitedit_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace testsupport
