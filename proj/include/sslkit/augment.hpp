#pragma once

// Stochastic image augmentation producing V views per image. Everything here
// is outside the gradient path: images are plain float tensors in [0,1],
// laid out CHW (single image) or BCHW (batch).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit::augment {

struct ColorJitter {
  float brightness = 0.4f;
  float contrast = 0.4f;
  float saturation = 0.4f;
  float hue = 0.1f;
  float apply_prob = 0.8f;
};

struct AugmentPolicy {
  std::pair<float, float> crop_scale{0.2f, 1.0f};
  float flip_prob = 0.5f;
  ColorJitter jitter;
  float grayscale_prob = 0.2f;
  float blur_prob = 0.5f;
  float solarize_prob = 0.0f;
  std::string strength_tag = "strong";

  void validate() const;  // throws nd::TensorError on bad fields

  static AugmentPolicy strong_view1();
  static AugmentPolicy strong_view2();
  static AugmentPolicy weak();      // crop + flip only
  static AugmentPolicy identity();  // no-op pipeline, useful in tests/eval
};

struct ViewBatch {
  std::vector<nd::Tensor<float>> views;  // V tensors, each B x C x H x W
  std::vector<int64_t> indices;          // B sample ids
  std::vector<int> labels;               // optional, B class ids or empty
};

// Single-image transforms; img is C x H x W with pixels in [0,1] and each
// returns a clamped tensor of the same shape.
nd::Tensor<float> random_resized_crop(const nd::Tensor<float>& img,
                                      std::pair<float, float> scale, Rng& rng);
nd::Tensor<float> hflip(const nd::Tensor<float>& img);
nd::Tensor<float> color_jitter(const nd::Tensor<float>& img, const ColorJitter& cj,
                               Rng& rng);
nd::Tensor<float> grayscale(const nd::Tensor<float>& img);
nd::Tensor<float> gaussian_blur(const nd::Tensor<float>& img, float sigma);
nd::Tensor<float> solarize(const nd::Tensor<float>& img, float threshold = 0.5f);

// Applies one full policy to a single image, drawing all randomness from rng.
nd::Tensor<float> apply_policy(const nd::Tensor<float>& img,
                               const AugmentPolicy& policy, Rng& rng);

ViewBatch generate_views(const nd::Tensor<float>& images,
                         const std::vector<AugmentPolicy>& policies, Rng& rng,
                         std::vector<int64_t> indices = {},
                         std::vector<int> labels = {});

}  // namespace sslkit::augment
