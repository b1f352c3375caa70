#include "sslkit/augment.hpp"

#include <algorithm>
#include <cmath>

namespace sslkit::augment {

using nd::Tensor;
using nd::TensorError;

namespace {

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

void require_chw(const Tensor<float>& img, const char* who) {
  if (img.shape().size() != 3)
    throw TensorError(std::string(who) + ": expected a C x H x W image");
}

void check_prob(float p, const char* name) {
  if (p < 0.0f || p > 1.0f)
    throw TensorError(std::string("AugmentPolicy: ") + name + " must be in [0,1]");
}

// bilinear sample at fractional (y, x), clamped to the image border
float sample_bilinear(const std::vector<float>& px, int64_t c, int64_t h, int64_t w,
                      float y, float x) {
  const float yc = std::clamp(y, 0.0f, static_cast<float>(h - 1));
  const float xc = std::clamp(x, 0.0f, static_cast<float>(w - 1));
  const int64_t y0 = static_cast<int64_t>(std::floor(yc));
  const int64_t x0 = static_cast<int64_t>(std::floor(xc));
  const int64_t y1 = std::min(y0 + 1, h - 1);
  const int64_t x1 = std::min(x0 + 1, w - 1);
  const float fy = yc - static_cast<float>(y0);
  const float fx = xc - static_cast<float>(x0);
  auto at = [&](int64_t yy, int64_t xx) {
    return px[static_cast<size_t>((c * h + yy) * w + xx)];
  };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

void AugmentPolicy::validate() const {
  if (!(crop_scale.first > 0.0f && crop_scale.first <= crop_scale.second &&
        crop_scale.second <= 1.0f))
    throw TensorError("AugmentPolicy: crop_scale must satisfy 0 < min <= max <= 1");
  check_prob(flip_prob, "flip_prob");
  check_prob(jitter.apply_prob, "jitter.apply_prob");
  check_prob(grayscale_prob, "grayscale_prob");
  check_prob(blur_prob, "blur_prob");
  check_prob(solarize_prob, "solarize_prob");
  if (strength_tag != "strong" && strength_tag != "weak")
    throw TensorError("AugmentPolicy: strength_tag must be 'strong' or 'weak'");
}

AugmentPolicy AugmentPolicy::strong_view1() { return AugmentPolicy{}; }

AugmentPolicy AugmentPolicy::strong_view2() {
  AugmentPolicy p;
  p.blur_prob = 0.1f;
  p.solarize_prob = 0.2f;
  return p;
}

AugmentPolicy AugmentPolicy::weak() {
  AugmentPolicy p;
  p.jitter.apply_prob = 0.0f;
  p.grayscale_prob = 0.0f;
  p.blur_prob = 0.0f;
  p.solarize_prob = 0.0f;
  p.strength_tag = "weak";
  return p;
}

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p = weak();
  p.crop_scale = {1.0f, 1.0f};
  p.flip_prob = 0.0f;
  p.strength_tag = "weak";
  return p;
}

Tensor<float> random_resized_crop(const Tensor<float>& img,
                                  std::pair<float, float> scale, Rng& rng) {
  require_chw(img, "random_resized_crop");
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const auto area = static_cast<float>(h * w);

  int64_t cw = w, ch = h, cx = 0, cy = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const float target =
        area * static_cast<float>(rng.uniform(scale.first, scale.second));
    const float log_lo = std::log(3.0f / 4.0f), log_hi = std::log(4.0f / 3.0f);
    const float aspect = std::exp(static_cast<float>(rng.uniform(log_lo, log_hi)));
    const auto tw = static_cast<int64_t>(std::round(std::sqrt(target * aspect)));
    const auto th = static_cast<int64_t>(std::round(std::sqrt(target / aspect)));
    if (tw < 1 || th < 1 || tw > w || th > h) continue;
    cw = tw;
    ch = th;
    cx = tw == w ? 0 : static_cast<int64_t>(rng.uniform(0, static_cast<double>(w - tw + 1)));
    cy = th == h ? 0 : static_cast<int64_t>(rng.uniform(0, static_cast<double>(h - th + 1)));
    cx = std::min(cx, w - tw);
    cy = std::min(cy, h - th);
    break;
  }
  // fallback after 10 failed attempts: full center crop (identity region)

  if (cw == w && ch == h && cx == 0 && cy == 0) return img;

  std::vector<float> out(static_cast<size_t>(c * h * w));
  const float sy = static_cast<float>(ch) / static_cast<float>(h);
  const float sx = static_cast<float>(cw) / static_cast<float>(w);
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const float srcy = (static_cast<float>(y) + 0.5f) * sy - 0.5f +
                           static_cast<float>(cy);
        const float srcx = (static_cast<float>(x) + 0.5f) * sx - 0.5f +
                           static_cast<float>(cx);
        out[static_cast<size_t>((ci * h + y) * w + x)] =
            clamp01(sample_bilinear(img.data(), ci, h, w, srcy, srcx));
      }
  return Tensor<float>::from(img.shape(), std::move(out));
}

Tensor<float> hflip(const Tensor<float>& img) {
  require_chw(img, "hflip");
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<float> out(img.data().size());
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        out[static_cast<size_t>((ci * h + y) * w + x)] =
            img.data()[static_cast<size_t>((ci * h + y) * w + (w - 1 - x))];
  return Tensor<float>::from(img.shape(), std::move(out));
}

Tensor<float> color_jitter(const Tensor<float>& img, const ColorJitter& cj, Rng& rng) {
  require_chw(img, "color_jitter");
  if (img.dim(0) != 3) throw TensorError("color_jitter: expected 3 channels");
  const int64_t h = img.dim(1), w = img.dim(2);
  const int64_t n = h * w;
  std::vector<float> px = img.data();

  // factors are drawn unconditionally so the rng stream does not depend on
  // which strengths are zero
  const float fb = static_cast<float>(
      rng.uniform(std::max(0.0f, 1 - cj.brightness), 1 + cj.brightness));
  const float fc = static_cast<float>(
      rng.uniform(std::max(0.0f, 1 - cj.contrast), 1 + cj.contrast));
  const float fs = static_cast<float>(
      rng.uniform(std::max(0.0f, 1 - cj.saturation), 1 + cj.saturation));
  const float fh = static_cast<float>(rng.uniform(-cj.hue, cj.hue));

  for (auto& v : px) v = clamp01(v * fb);

  float mean_gray = 0;
  for (int64_t i = 0; i < n; ++i)
    mean_gray += 0.299f * px[static_cast<size_t>(i)] +
                 0.587f * px[static_cast<size_t>(n + i)] +
                 0.114f * px[static_cast<size_t>(2 * n + i)];
  mean_gray /= static_cast<float>(n);
  for (auto& v : px) v = clamp01(mean_gray + fc * (v - mean_gray));

  for (int64_t i = 0; i < n; ++i) {
    const float g = 0.299f * px[static_cast<size_t>(i)] +
                    0.587f * px[static_cast<size_t>(n + i)] +
                    0.114f * px[static_cast<size_t>(2 * n + i)];
    for (int64_t c = 0; c < 3; ++c) {
      auto& v = px[static_cast<size_t>(c * n + i)];
      v = clamp01(g + fs * (v - g));
    }
  }

  if (fh != 0.0f) {
    // rotate the hue by fh turns in HSV space
    for (int64_t i = 0; i < n; ++i) {
      float r = px[static_cast<size_t>(i)];
      float g = px[static_cast<size_t>(n + i)];
      float b = px[static_cast<size_t>(2 * n + i)];
      const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
      const float delta = mx - mn;
      float hh = 0;
      if (delta > 0) {
        if (mx == r)
          hh = std::fmod((g - b) / delta, 6.0f);
        else if (mx == g)
          hh = (b - r) / delta + 2.0f;
        else
          hh = (r - g) / delta + 4.0f;
        hh /= 6.0f;
      }
      const float s = mx > 0 ? delta / mx : 0.0f;
      hh = hh + fh;
      hh -= std::floor(hh);
      const float hp = hh * 6.0f;
      const float x = mx * s * (1 - std::abs(std::fmod(hp, 2.0f) - 1));
      const float m = mx - mx * s;
      const float cc = mx * s;
      float rr = 0, gg = 0, bb = 0;
      switch (static_cast<int>(hp) % 6) {
        case 0: rr = cc; gg = x; break;
        case 1: rr = x; gg = cc; break;
        case 2: gg = cc; bb = x; break;
        case 3: gg = x; bb = cc; break;
        case 4: rr = x; bb = cc; break;
        default: rr = cc; bb = x; break;
      }
      px[static_cast<size_t>(i)] = clamp01(rr + m);
      px[static_cast<size_t>(n + i)] = clamp01(gg + m);
      px[static_cast<size_t>(2 * n + i)] = clamp01(bb + m);
    }
  }
  return Tensor<float>::from(img.shape(), std::move(px));
}

Tensor<float> grayscale(const Tensor<float>& img) {
  require_chw(img, "grayscale");
  if (img.dim(0) != 3) throw TensorError("grayscale: expected 3 channels");
  const int64_t n = img.dim(1) * img.dim(2);
  std::vector<float> out(img.data().size());
  for (int64_t i = 0; i < n; ++i) {
    const float g = 0.299f * img.data()[static_cast<size_t>(i)] +
                    0.587f * img.data()[static_cast<size_t>(n + i)] +
                    0.114f * img.data()[static_cast<size_t>(2 * n + i)];
    for (int64_t c = 0; c < 3; ++c) out[static_cast<size_t>(c * n + i)] = clamp01(g);
  }
  return Tensor<float>::from(img.shape(), std::move(out));
}

Tensor<float> gaussian_blur(const Tensor<float>& img, float sigma) {
  require_chw(img, "gaussian_blur");
  if (sigma <= 0.0f) throw TensorError("gaussian_blur: sigma must be > 0");
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(2 * sigma)));
  std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
  float ksum = 0;
  for (int64_t i = -radius; i <= radius; ++i) {
    const float v = std::exp(-static_cast<float>(i * i) / (2 * sigma * sigma));
    kernel[static_cast<size_t>(i + radius)] = v;
    ksum += v;
  }
  for (auto& v : kernel) v /= ksum;

  std::vector<float> tmp(img.data().size()), out(img.data().size());
  auto idx = [&](int64_t ci, int64_t y, int64_t x) {
    return static_cast<size_t>((ci * h + y) * w + x);
  };
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        float acc = 0;
        for (int64_t k = -radius; k <= radius; ++k)
          acc += kernel[static_cast<size_t>(k + radius)] *
                 img.data()[idx(ci, y, std::clamp(x + k, int64_t{0}, w - 1))];
        tmp[idx(ci, y, x)] = acc;
      }
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        float acc = 0;
        for (int64_t k = -radius; k <= radius; ++k)
          acc += kernel[static_cast<size_t>(k + radius)] *
                 tmp[idx(ci, std::clamp(y + k, int64_t{0}, h - 1), x)];
        out[idx(ci, y, x)] = clamp01(acc);
      }
  return Tensor<float>::from(img.shape(), std::move(out));
}

Tensor<float> solarize(const Tensor<float>& img, float threshold) {
  require_chw(img, "solarize");
  std::vector<float> out = img.data();
  for (auto& v : out)
    if (v > threshold) v = clamp01(1.0f - v);
  return Tensor<float>::from(img.shape(), std::move(out));
}

Tensor<float> apply_policy(const Tensor<float>& img, const AugmentPolicy& policy,
                           Rng& rng) {
  policy.validate();
  Tensor<float> out = random_resized_crop(img, policy.crop_scale, rng);
  if (rng.uniform() < policy.flip_prob) out = hflip(out);
  if (policy.strength_tag == "weak") return out;
  if (rng.uniform() < policy.jitter.apply_prob)
    out = color_jitter(out, policy.jitter, rng);
  if (rng.uniform() < policy.grayscale_prob) out = grayscale(out);
  if (rng.uniform() < policy.blur_prob)
    out = gaussian_blur(out, static_cast<float>(rng.uniform(0.1, 2.0)));
  if (rng.uniform() < policy.solarize_prob) out = solarize(out);
  return out;
}

ViewBatch generate_views(const Tensor<float>& images,
                         const std::vector<AugmentPolicy>& policies, Rng& rng,
                         std::vector<int64_t> indices, std::vector<int> labels) {
  if (images.shape().size() != 4)
    throw TensorError("generate_views: expected a B x C x H x W batch");
  const int64_t b = images.dim(0);
  if (b == 0) throw TensorError("generate_views: empty batch");
  if (policies.size() < 2)
    throw TensorError("generate_views: need at least 2 policies");
  const int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const int64_t per = c * h * w;

  ViewBatch vb;
  if (indices.empty()) {
    indices.resize(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) indices[static_cast<size_t>(i)] = i;
  }
  vb.indices = std::move(indices);
  vb.labels = std::move(labels);

  for (const auto& policy : policies) {
    std::vector<float> view(images.data().size());
    for (int64_t i = 0; i < b; ++i) {
      std::vector<float> one(images.data().begin() + i * per,
                             images.data().begin() + (i + 1) * per);
      Tensor<float> out =
          apply_policy(Tensor<float>::from({c, h, w}, std::move(one)), policy, rng);
      std::copy(out.data().begin(), out.data().end(),
                view.begin() + i * per);
    }
    vb.views.push_back(Tensor<float>::from(images.shape(), std::move(view)));
  }
  return vb;
}

}  // namespace sslkit::augment
