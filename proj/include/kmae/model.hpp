// SPDX-License-Identifier: Apache-2.0
//
// The KMAE network: k-space line tokenization, transformer encoder,
// interpolation decoder, task heads, plus the image-domain masked
// autoencoder mode and a small residual CNN baseline.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmae/container.hpp"
#include "kmae/kspace.hpp"
#include "kmae/nn.hpp"
#include "kmae/optim.hpp"
#include "kmae/sampling.hpp"

namespace kmae {

struct GridDims {
  int height = 32, width = 32, frames = 8, slices = 3;

  bool operator==(const GridDims&) const = default;
  void validate() const {
    if (!is_power_of_two(height) || !is_power_of_two(width))
      throw ConfigError("grid: H and W must be powers of two");
    if (frames < 1 || slices < 1)
      throw ConfigError("grid: frames and slices must be positive");
  }
};

enum class InputDomain { kspace, image };
enum class TokenScheme { kline, image_patch };

struct ModelConfig {
  InputDomain input_domain = InputDomain::kspace;
  int embed_dim = 64;
  int encoder_layers = 4;
  int heads = 4;
  int decoder_layers = 2;
  int decoder_dim = 32;
  TokenScheme token_scheme = TokenScheme::kline;
  int image_patch_size = 2;
  double mask_ratio = 0.75;  // image mode pre-training only
  GridDims grid;

  // tested configuration
  static ModelConfig desk_preset(GridDims grid = {}) {
    ModelConfig c;
    c.grid = grid;
    return c;
  }

  // 8 layers, 8 heads, embedding 512; constructed and smoke-run, not trained
  // at desk scale
  static ModelConfig paper_preset(GridDims grid = {}) {
    ModelConfig c;
    c.embed_dim = 512;
    c.encoder_layers = 8;
    c.heads = 8;
    c.decoder_layers = 4;
    c.decoder_dim = 256;
    c.grid = grid;
    return c;
  }

  int token_count() const {
    if (token_scheme == TokenScheme::kline) return grid.frames * grid.height;
    const int per_frame = (grid.height / image_patch_size) *
                          (grid.width / image_patch_size);
    return grid.frames * per_frame;
  }

  int token_feature_dim() const {
    return token_scheme == TokenScheme::kline
               ? 2 * grid.width
               : image_patch_size * image_patch_size;
  }

  void validate() const {
    grid.validate();
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
      throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                        " must be divisible by heads " + std::to_string(heads));
    if (encoder_layers < 1 || decoder_layers < 1 || decoder_dim < 1)
      throw ConfigError("model: layer counts and decoder_dim must be positive");
    if (token_scheme == TokenScheme::image_patch) {
      if (image_patch_size < 1 || grid.height % image_patch_size != 0 ||
          grid.width % image_patch_size != 0)
        throw ConfigError("model: patch size must divide H and W");
      if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
        throw ConfigError("model: mask_ratio must be in [0, 1)");
    }
    const bool domain_matches =
        (input_domain == InputDomain::kspace) ==
        (token_scheme == TokenScheme::kline);
    if (!domain_matches)
      throw ConfigError("model: kspace domain pairs with kline tokens, image "
                        "domain with image patches");
  }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TokenPosition {
  int frame = 0;
  int index = 0;  // phase-encode line (kline) or patch index (image)
};

template <class T>
struct TokenGridT {
  Tensor<T> tokens;  // [s, embed_dim]
  std::vector<TokenPosition> positions;
  std::vector<uint8_t> visibility;  // 1 = sampled / visible

  int masked_count() const {
    int n = 0;
    for (uint8_t v : visibility) n += v == 0;
    return n;
  }
};

using TokenGrid = TokenGridT<float>;

// ---------------------------------------------------------------------------
// autograd bridge for the centered orthonormal FFT
// ---------------------------------------------------------------------------

// x is a [2, T, H, W] stack of (real, imaginary) planes in k-space; the
// result is the same stack in the image domain. The transform is unitary,
// so the backward pass is the forward FFT applied to the cotangent.
template <class T>
Tensor<T> ifft2c_stack(const Tensor<T>& x) {
  if (x.shape().size() != 4 || x.dim(0) != 2)
    throw DimensionError("ifft2c_stack: need [2,T,H,W], got " +
                         shape_str(x.shape()));
  const int t = x.dim(1), h = x.dim(2), w = x.dim(3);
  const size_t plane = static_cast<size_t>(t) * h * w;
  const size_t fsz = static_cast<size_t>(h) * w;
  std::vector<T> out(x.value().begin(), x.value().end());
  std::vector<std::complex<T>> frame(fsz);
  for (int f = 0; f < t; ++f) {
    for (size_t i = 0; i < fsz; ++i)
      frame[i] = {out[f * fsz + i], out[plane + f * fsz + i]};
    ifft2_frame_raw(frame.data(), h, w);
    for (size_t i = 0; i < fsz; ++i) {
      out[f * fsz + i] = frame[i].real();
      out[plane + f * fsz + i] = frame[i].imag();
    }
  }
  auto px = x.node();
  return detail::make_op<T>(
      x.shape(), std::move(out), {px}, [px, t, h, w, plane, fsz](TensorNode<T>& n) {
        if (!px->requires_grad) return;
        if (px->grad.empty()) px->grad.assign(px->value.size(), T(0));
        std::vector<std::complex<T>> fr(fsz);
        for (int f = 0; f < t; ++f) {
          for (size_t i = 0; i < fsz; ++i)
            fr[i] = {n.grad[f * fsz + i], n.grad[plane + f * fsz + i]};
          fft2_frame_raw(fr.data(), h, w);
          for (size_t i = 0; i < fsz; ++i) {
            px->grad[f * fsz + i] += fr[i].real();
            px->grad[plane + f * fsz + i] += fr[i].imag();
          }
        }
      });
}

// constant [2,T,H,W] stack tensor from a complex series
template <class T, class U>
Tensor<T> series_to_stack(const ComplexSeriesT<U>& s) {
  const size_t plane = s.data.size();
  std::vector<T> v(2 * plane);
  for (size_t i = 0; i < plane; ++i) {
    v[i] = static_cast<T>(s.data[i].real());
    v[plane + i] = static_cast<T>(s.data[i].imag());
  }
  return Tensor<T>::from({2, s.frames, s.height, s.width}, std::move(v));
}

// complex series from the values of a [2,T,H,W] stack tensor
template <class U, class T>
ComplexSeriesT<U> stack_to_series(const Tensor<T>& stack, Domain domain) {
  const int t = stack.dim(1), h = stack.dim(2), w = stack.dim(3);
  ComplexSeriesT<U> s = ComplexSeriesT<U>::make(domain, t, h, w);
  const size_t plane = s.data.size();
  auto v = stack.value();
  for (size_t i = 0; i < plane; ++i)
    s.data[i] = {static_cast<U>(v[i]), static_cast<U>(v[plane + i])};
  return s;
}

// ---------------------------------------------------------------------------
// KMAE
// ---------------------------------------------------------------------------

template <class T>
class KmaeModel {
 public:
  KmaeModel(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(mix_seed(init_seed, 0x90DE1ULL));
    const int d = cfg_.embed_dim;
    const int dd = cfg_.decoder_dim;
    const int s = cfg_.token_count();
    const int fdim = cfg_.token_feature_dim();

    proj_ = make_linear(ps_, "tok.proj", fdim, d, rng);
    mask_token_ = ps_.create("tok.mask", {d});
    init_truncated_normal(mask_token_, rng);
    pos_embed_ = ps_.create("tok.pos", {s, d});
    init_truncated_normal(pos_embed_, rng);

    for (int i = 0; i < cfg_.encoder_layers; ++i)
      enc_blocks_.push_back(make_transformer_block(
          ps_, "enc." + std::to_string(i), d, cfg_.heads, rng));

    dec_in_ = make_linear(ps_, "dec.in", d, dd, rng);
    const int dec_heads = std::max(1, cfg_.heads / 2);
    for (int i = 0; i < cfg_.decoder_layers; ++i)
      dec_blocks_.push_back(make_transformer_block(
          ps_, "dec." + std::to_string(i), dd,
          dd % dec_heads == 0 ? dec_heads : 1, rng));
    dec_out_ = make_linear(ps_, "dec.out", dd, fdim, rng);

    reg_head_ = make_linear(ps_, "head.reg", d, 1, rng);
    cls_head_ = make_linear(ps_, "head.cls", d, 2, rng);
    seg_w_ = ps_.create("head.seg.w", {3});
    init_truncated_normal(seg_w_, rng);
    seg_b_ = ps_.create("head.seg.b", {1});

    build_layout_maps();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  static bool is_encoder_param(const std::string& name) {
    return name.rfind("tok.", 0) == 0 || name.rfind("enc.", 0) == 0;
  }
  static bool is_decoder_param(const std::string& name) {
    return name.rfind("dec.", 0) == 0;
  }

  // One token per (frame, phase-encode line). Sampled lines contribute their
  // 2W interleaved reals through the shared projection; unsampled lines use
  // the learned mask token. All T*H tokens are produced: the encoder sees
  // the full grid (interpolation setting).
  TokenGridT<T> tokenize_kspace(const ComplexSeriesT<T>& k_masked,
                                const SamplingMask& mask) const {
    if (cfg_.token_scheme != TokenScheme::kline)
      throw ConfigError("tokenize_kspace: model is not in kline mode");
    const auto& g = cfg_.grid;
    if (k_masked.frames != g.frames || k_masked.height != g.height ||
        k_masked.width != g.width || mask.frames != g.frames ||
        mask.num_lines != g.height)
      throw DimensionError("tokenize_kspace: input does not match grid " +
                           std::to_string(g.frames) + "x" +
                           std::to_string(g.height) + "x" +
                           std::to_string(g.width));
    const int s = cfg_.token_count();
    const int fdim = cfg_.token_feature_dim();

    std::vector<T> feat(static_cast<size_t>(s) * fdim, T(0));
    TokenGridT<T> grid;
    grid.positions.resize(static_cast<size_t>(s));
    grid.visibility.resize(static_cast<size_t>(s));
    for (int t = 0; t < g.frames; ++t) {
      for (int h = 0; h < g.height; ++h) {
        const int tok = t * g.height + h;
        grid.positions[static_cast<size_t>(tok)] = {t, h};
        const bool vis = mask.sampled(t, h);
        grid.visibility[static_cast<size_t>(tok)] = vis ? 1 : 0;
        if (vis) {
          T* row = feat.data() + static_cast<size_t>(tok) * fdim;
          for (int w = 0; w < g.width; ++w) {
            const auto& z = k_masked.at(t, h, w);
            row[2 * w] = static_cast<T>(z.real());
            row[2 * w + 1] = static_cast<T>(z.imag());
          }
        }
      }
    }
    grid.tokens = assemble_tokens(
        Tensor<T>::from({s, fdim}, std::move(feat)), grid.visibility);
    return grid;
  }

  // Non-overlapping p x p patches per frame; a seeded mask_ratio fraction is
  // replaced by the mask token (floor rule).
  TokenGridT<T> tokenize_image(std::span<const T> image, double mask_ratio,
                               uint64_t mask_seed) const {
    if (cfg_.token_scheme != TokenScheme::image_patch)
      throw ConfigError("tokenize_image: model is not in image-patch mode");
    const auto& g = cfg_.grid;
    const size_t expected =
        static_cast<size_t>(g.frames) * g.height * g.width;
    if (image.size() != expected)
      throw DimensionError("tokenize_image: expected " +
                           std::to_string(expected) + " pixels, got " +
                           std::to_string(image.size()));
    const int p = cfg_.image_patch_size;
    const int ph = g.height / p, pw = g.width / p;
    const int s = cfg_.token_count();
    const int fdim = cfg_.token_feature_dim();

    std::vector<T> feat(static_cast<size_t>(s) * fdim);
    TokenGridT<T> grid;
    grid.positions.resize(static_cast<size_t>(s));
    grid.visibility.assign(static_cast<size_t>(s), 1);
    for (int t = 0; t < g.frames; ++t)
      for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
          const int tok = (t * ph + py) * pw + px;
          grid.positions[static_cast<size_t>(tok)] = {t, py * pw + px};
          T* row = feat.data() + static_cast<size_t>(tok) * fdim;
          for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
              row[dy * p + dx] =
                  image[(static_cast<size_t>(t) * g.height + py * p + dy) *
                            g.width +
                        px * p + dx];
        }

    const int n_masked = static_cast<int>(std::floor(mask_ratio * s));
    if (n_masked > 0) {
      std::vector<int> order(static_cast<size_t>(s));
      for (int i = 0; i < s; ++i) order[static_cast<size_t>(i)] = i;
      Rng rng(mix_seed(mask_seed, 0x1A5CULL));
      rng.shuffle(order);
      for (int i = 0; i < n_masked; ++i)
        grid.visibility[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0;
    }
    grid.tokens = assemble_tokens(
        Tensor<T>::from({s, fdim}, std::move(feat)), grid.visibility);
    return grid;
  }

  // full-grid encoder: pre-norm transformer blocks, positions preserved
  Tensor<T> encode(const TokenGridT<T>& grid) const {
    return run_encoder(grid.tokens);
  }

  // MAE-style path for the image domain: only visible tokens go through the
  // encoder; encoded rows are scattered back over the token grid so hidden
  // positions keep their mask-token embedding for the decoder.
  Tensor<T> encode_visible(const TokenGridT<T>& grid) const {
    std::vector<int> vis_idx;
    for (size_t i = 0; i < grid.visibility.size(); ++i)
      if (grid.visibility[i]) vis_idx.push_back(static_cast<int>(i));
    if (vis_idx.size() == grid.visibility.size()) return encode(grid);
    Tensor<T> enc = run_encoder(gather_rows(grid.tokens, vis_idx));
    return scatter_rows(grid.tokens, vis_idx, enc);
  }

  // interpolation decoder: decoder blocks at decoder_dim, then a linear head
  // back to per-token features, reassembled onto the full k-space grid as a
  // [2,T,H,W] stack
  Tensor<T> interpolation_decoder(const Tensor<T>& encoded) const {
    Tensor<T> x = run_decoder(encoded);
    if (cfg_.token_scheme != TokenScheme::kline)
      throw ConfigError("interpolation_decoder: model is not in kline mode");
    return gather_flat(x, kline_out_map_,
                       {2, cfg_.grid.frames, cfg_.grid.height, cfg_.grid.width});
  }

  // image-domain decoder: per-token pixel predictions reassembled to [T,H,W]
  Tensor<T> image_decoder(const Tensor<T>& encoded) const {
    Tensor<T> x = run_decoder(encoded);
    if (cfg_.token_scheme != TokenScheme::image_patch)
      throw ConfigError("image_decoder: model is not in image-patch mode");
    return gather_flat(x, patch_out_map_,
                       {cfg_.grid.frames, cfg_.grid.height, cfg_.grid.width});
  }

  // mean-pool over tokens, then a single linear layer
  Tensor<T> regression_head(const Tensor<T>& encoded) const {
    return reshape(linear(mean_pool(encoded), reg_head_), {1});
  }

  Tensor<T> classification_logits(const Tensor<T>& encoded) const {
    return linear(mean_pool(encoded), cls_head_);
  }

  // probability pair via softmax
  Tensor<T> classification_head(const Tensor<T>& encoded) const {
    return softmax_rows(classification_logits(encoded));
  }

  // reconstructed k-space -> image domain -> pointwise (real, imaginary,
  // magnitude) features -> shared 1x1 convolution -> per-pixel logit
  Tensor<T> segmentation_logits(const Tensor<T>& kspace_stack) const {
    Tensor<T> img = ifft2c_stack(kspace_stack);
    const auto& g = cfg_.grid;
    const std::vector<int> shape{g.frames, g.height, g.width};
    Tensor<T> re = gather_flat(img, re_plane_map_, shape);
    Tensor<T> im = gather_flat(img, im_plane_map_, shape);
    Tensor<T> mag = hypot_eps(re, im, T(1e-12));
    Tensor<T> w0 = gather_flat(seg_w_, seg_w0_map_, {1});
    Tensor<T> w1 = gather_flat(seg_w_, seg_w1_map_, {1});
    Tensor<T> w2 = gather_flat(seg_w_, seg_w2_map_, {1});
    Tensor<T> lin = add(add(scale_by_scalar(re, w0), scale_by_scalar(im, w1)),
                        scale_by_scalar(mag, w2));
    return add_scalar(lin, seg_b_);
  }

  Tensor<T> segmentation_head(const Tensor<T>& kspace_stack) const {
    return sigmoid(segmentation_logits(kspace_stack));
  }

 private:
  Tensor<T> assemble_tokens(const Tensor<T>& features,
                            const std::vector<uint8_t>& visibility) const {
    const int s = features.rows();
    std::vector<T> vis(static_cast<size_t>(s)), hid(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) {
      vis[static_cast<size_t>(i)] = visibility[static_cast<size_t>(i)] ? T(1) : T(0);
      hid[static_cast<size_t>(i)] = T(1) - vis[static_cast<size_t>(i)];
    }
    Tensor<T> projected = mul_rows(linear(features, proj_), vis);
    Tensor<T> masked = mul_rows(repeat_row(mask_token_, s), hid);
    return add(add(projected, masked), pos_embed_);
  }

  Tensor<T> run_encoder(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (const auto& b : enc_blocks_) h = b.forward(h);
    return h;
  }

  Tensor<T> run_decoder(const Tensor<T>& encoded) const {
    Tensor<T> x = linear(encoded, dec_in_);
    for (const auto& b : dec_blocks_) x = b.forward(x);
    return linear(x, dec_out_);
  }

  Tensor<T> mean_pool(const Tensor<T>& x) const {
    const int s = x.rows();
    Tensor<T> ones = Tensor<T>::full({1, s}, T(1) / static_cast<T>(s));
    return matmul(ones, x);
  }

  void build_layout_maps() {
    const auto& g = cfg_.grid;
    if (cfg_.token_scheme == TokenScheme::kline) {
      auto m = std::make_shared<std::vector<int>>();
      m->resize(static_cast<size_t>(2) * g.frames * g.height * g.width);
      const int fdim = cfg_.token_feature_dim();
      size_t j = 0;
      for (int c = 0; c < 2; ++c)
        for (int t = 0; t < g.frames; ++t)
          for (int h = 0; h < g.height; ++h)
            for (int w = 0; w < g.width; ++w)
              (*m)[j++] = (t * g.height + h) * fdim + 2 * w + c;
      kline_out_map_ = std::move(m);
    } else {
      const int p = cfg_.image_patch_size;
      const int ph = g.height / p, pw = g.width / p;
      auto m = std::make_shared<std::vector<int>>();
      m->resize(static_cast<size_t>(g.frames) * g.height * g.width);
      const int fdim = cfg_.token_feature_dim();
      size_t j = 0;
      for (int t = 0; t < g.frames; ++t)
        for (int y = 0; y < g.height; ++y)
          for (int x = 0; x < g.width; ++x) {
            const int tok = (t * ph + y / p) * pw + x / p;
            (*m)[j++] = tok * fdim + (y % p) * p + (x % p);
          }
      patch_out_map_ = std::move(m);
    }
    const size_t plane = static_cast<size_t>(g.frames) * g.height * g.width;
    auto re = std::make_shared<std::vector<int>>(plane);
    auto im = std::make_shared<std::vector<int>>(plane);
    for (size_t i = 0; i < plane; ++i) {
      (*re)[i] = static_cast<int>(i);
      (*im)[i] = static_cast<int>(plane + i);
    }
    re_plane_map_ = std::move(re);
    im_plane_map_ = std::move(im);
    seg_w0_map_ = std::make_shared<std::vector<int>>(std::vector<int>{0});
    seg_w1_map_ = std::make_shared<std::vector<int>>(std::vector<int>{1});
    seg_w2_map_ = std::make_shared<std::vector<int>>(std::vector<int>{2});
  }

  ModelConfig cfg_;
  ParamStore<T> ps_;
  LinearParams<T> proj_, dec_in_, dec_out_, reg_head_, cls_head_;
  Tensor<T> mask_token_, pos_embed_, seg_w_, seg_b_;
  std::vector<TransformerBlock<T>> enc_blocks_, dec_blocks_;
  std::shared_ptr<const std::vector<int>> kline_out_map_, patch_out_map_,
      re_plane_map_, im_plane_map_, seg_w0_map_, seg_w1_map_, seg_w2_map_;
};

// sampled lines replaced by measured values, unsampled kept from prediction;
// copies are verbatim so sampled lines are bit-equal to the measurement
template <class T>
ComplexSeriesT<T> data_consistency(const ComplexSeriesT<T>& predicted,
                                   const ComplexSeriesT<T>& measured,
                                   const SamplingMask& mask) {
  if (predicted.frames != measured.frames ||
      predicted.height != measured.height ||
      predicted.width != measured.width || mask.frames != predicted.frames ||
      mask.num_lines != predicted.height)
    throw DimensionError("data_consistency: dimension mismatch");
  ComplexSeriesT<T> out = predicted;
  out.domain = Domain::kspace;
  for (int t = 0; t < out.frames; ++t)
    for (int h = 0; h < out.height; ++h)
      if (mask.sampled(t, h))
        for (int w = 0; w < out.width; ++w) out.at(t, h, w) = measured.at(t, h, w);
  return out;
}

// arithmetic mean of per-slice scalars
double multi_slice_aggregate(const std::vector<double>& per_slice);

// mean of probability vectors, renormalized
std::vector<double> multi_slice_aggregate_probs(
    const std::vector<std::vector<double>>& per_slice);

// ---------------------------------------------------------------------------
// CNN baseline
// ---------------------------------------------------------------------------

struct CnnConfig {
  GridDims grid;
  std::vector<int> stage_channels = {16, 16, 32, 32};

  int in_channels() const { return 2 * grid.frames; }
  void validate() const {
    grid.validate();
    if (stage_channels.empty())
      throw ConfigError("cnn: need at least one stage");
  }
  nlohmann::json to_json() const;
  static CnnConfig from_json(const nlohmann::json& j);
};

// Small residual CNN over the (real, imaginary) channel stack of masked
// k-space: stem conv, four stride-2 residual stages, global average pool,
// task-specific linear heads.
template <class T>
class CnnBaseline {
 public:
  CnnBaseline(CnnConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(mix_seed(init_seed, 0xC22ULL));
    int c = cfg_.stage_channels[0];
    stem_w_ = conv_param("cnn.stem", cfg_.in_channels(), c, rng);
    for (size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
      const int co = cfg_.stage_channels[i];
      const std::string p = "cnn.s" + std::to_string(i);
      down_.push_back(conv_param(p + ".down", c, co, rng));
      res1_.push_back(conv_param(p + ".c1", co, co, rng));
      res2_.push_back(conv_param(p + ".c2", co, co, rng));
      c = co;
    }
    reg_head_ = make_linear(ps_, "cnn.head.reg", c, 1, rng);
    cls_head_ = make_linear(ps_, "cnn.head.cls", c, 2, rng);
  }

  const CnnConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  // pooled feature vector [1, C]
  Tensor<T> features(const Tensor<T>& x) const {
    Tensor<T> h = relu(conv2d(x, stem_w_.w, stem_w_.b, 1, 1));
    for (size_t i = 0; i < down_.size(); ++i) {
      h = relu(conv2d(h, down_[i].w, down_[i].b, 2, 1));
      Tensor<T> r = relu(conv2d(h, res1_[i].w, res1_[i].b, 1, 1));
      r = conv2d(r, res2_[i].w, res2_[i].b, 1, 1);
      h = relu(add(h, r));
    }
    Tensor<T> pooled = global_avg_pool(h);
    return reshape(pooled, {1, static_cast<int>(pooled.size())});
  }

  Tensor<T> regression_head(const Tensor<T>& x) const {
    return reshape(linear(features(x), reg_head_), {1});
  }
  Tensor<T> classification_logits(const Tensor<T>& x) const {
    return linear(features(x), cls_head_);
  }

 private:
  struct ConvParams {
    Tensor<T> w, b;
  };
  ConvParams conv_param(const std::string& prefix, int cin, int cout, Rng& rng) {
    ConvParams p{ps_.create(prefix + ".w", {cout, cin, 3, 3}),
                 ps_.create(prefix + ".b", {cout})};
    // fan-in scaled init
    init_truncated_normal(p.w, rng, std::sqrt(2.0 / (9.0 * cin)));
    return p;
  }

  CnnConfig cfg_;
  ParamStore<T> ps_;
  ConvParams stem_w_;
  std::vector<ConvParams> down_, res1_, res2_;
  LinearParams<T> reg_head_, cls_head_;
};

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct CheckpointData {
  nlohmann::json meta;  // arch, model config, task, step, hashes
  std::vector<std::pair<std::string, std::vector<float>>> arrays;
};

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     nlohmann::json meta,
                     const std::vector<std::pair<std::string, std::vector<T>>>*
                         optimizer_arrays = nullptr) {
  Container c;
  c.meta = std::move(meta);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensors()[i];
    std::vector<float> vals(t.value().begin(), t.value().end());
    std::vector<long long> shape(t.shape().begin(), t.shape().end());
    c.add_f32("p." + params.names()[i], std::move(shape), vals);
  }
  if (optimizer_arrays)
    for (const auto& [name, vals] : *optimizer_arrays) {
      std::vector<float> f(vals.begin(), vals.end());
      c.add_f32("opt." + name, {static_cast<long long>(f.size())}, f);
    }
  write_container(path, c);
}

CheckpointData load_checkpoint(const std::string& path);

// copies arrays into an existing parameter store; every architecture
// parameter must be present exactly once
template <class T>
void restore_params(ParamStore<T>& params, const CheckpointData& ckpt) {
  size_t used = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string want = "p." + params.names()[i];
    const std::vector<float>* found = nullptr;
    for (const auto& [name, vals] : ckpt.arrays)
      if (name == want) {
        found = &vals;
        ++used;
        break;
      }
    if (!found)
      throw DataError("checkpoint: missing parameter '" + want + "'");
    auto& t = params.tensors()[i];
    if (static_cast<long long>(found->size()) != t.size())
      throw DataError("checkpoint: size mismatch for '" + want + "'");
    auto vals = t.value();
    for (size_t j = 0; j < vals.size(); ++j)
      vals[j] = static_cast<T>((*found)[j]);
  }
  size_t param_arrays = 0;
  for (const auto& [name, vals] : ckpt.arrays)
    param_arrays += name.rfind("p.", 0) == 0;
  if (used != param_arrays)
    throw DataError("checkpoint: contains arrays unknown to this architecture");
}

}  // namespace kmae
