// model.hpp — the hybrid CNN-Transformer segmentation model and a plain 3D
// U-Net baseline sharing the same encoder/decoder building blocks.
//
// Both models are templated on the scalar type (double for gradient
// verification, float for training) and are constructed for a fixed input
// grid, since the positional table's token count depends on it.
//
// Encoder stage: conv(3³, stride)-InstanceNorm-ReLU → conv(3³)-InstanceNorm,
// added to an identity or projected (1³ conv + InstanceNorm) shortcut, then
// ReLU. Tokens: patchify the final feature map into P³ patches, project with
// a bias-free linear map, add the learnable positional table. Transformer
// layer: pre-norm residual attention then pre-norm residual MLP
// (linear-GELU-linear, width d·mlp_ratio). Decoder: reproject tokens, fold
// back to the grid, then per mirrored stage trilinear-upsample by that
// stage's stride, concatenate the skip, and apply conv-InstanceNorm-ReLU;
// a 1³ conv produces per-class logits at full resolution.

#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "liverformer/ad/ops.hpp"
#include "liverformer/ad/tensor.hpp"
#include "liverformer/rng.hpp"
#include "liverformer/volume.hpp"

namespace liverformer {

struct LiverFormerConfig {
    std::size_t in_channels = 1;
    std::size_t classes = kNumClasses;
    std::vector<std::size_t> encoder_channels = {8, 16, 32};
    std::vector<std::size_t> encoder_strides = {1, 2, 2};
    std::size_t patch_size = 2;
    std::size_t hidden_dim = 64;
    std::size_t transformer_layers = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    Dims input_dims{16, 64, 64};

    std::size_t stride_product() const {
        std::size_t p = 1;
        for (std::size_t s : encoder_strides) p *= s;
        return p;
    }

    Dims token_grid() const {
        const std::size_t div = stride_product() * patch_size;
        return Dims{input_dims.d / div, input_dims.h / div, input_dims.w / div};
    }

    std::size_t token_count() const { return token_grid().voxels(); }

    void validate() const {
        if (encoder_channels.empty() || encoder_channels.size() != encoder_strides.size()) {
            throw ad::ShapeMismatch("config: encoder_channels and encoder_strides must be "
                                    "non-empty and the same length");
        }
        for (std::size_t s : encoder_strides) {
            if (s == 0) throw ad::ShapeMismatch("config: zero stride");
        }
        // The decoder mirrors stages S-1..1, so the first stage's stride is
        // never undone; it must keep full resolution.
        if (encoder_strides[0] != 1) {
            throw ad::ShapeMismatch("config: the first encoder stage must have stride 1");
        }
        if (classes < 2) throw ad::ShapeMismatch("config: need at least 2 classes");
        if (hidden_dim == 0 || heads == 0 || hidden_dim % heads != 0) {
            throw ad::IndivisibleHeads("config: hidden_dim " + std::to_string(hidden_dim) +
                                       " not divisible by heads " + std::to_string(heads));
        }
        if (transformer_layers == 0 || mlp_ratio == 0 || patch_size == 0 ||
            in_channels == 0) {
            throw ad::ShapeMismatch("config: zero-valued field");
        }
        const std::size_t div = stride_product() * patch_size;
        if (input_dims.d % div || input_dims.h % div || input_dims.w % div) {
            throw ad::NotDivisibleByPatch(
                "config: input dims " + input_dims.str() +
                " not divisible by stride product x patch size = " + std::to_string(div));
        }
    }
};

template <typename T>
class ParamRegistry {
  public:
    ad::Tensor<T>& add(const std::string& name, ad::Shape shape, std::vector<T> data) {
        if (by_name_.count(name)) {
            throw ad::AdError("duplicate parameter name: " + name);
        }
        by_name_[name] = params_.size();
        params_.push_back(ad::Tensor<T>::parameter(std::move(shape), std::move(data), name));
        return params_.back();
    }

    ad::Tensor<T>* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &params_[it->second];
    }

    std::vector<ad::Tensor<T>>& all() { return params_; }
    const std::vector<ad::Tensor<T>>& all() const { return params_; }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

  private:
    std::vector<ad::Tensor<T>> params_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

namespace detail {

template <typename T>
std::vector<T> lecun_uniform(std::size_t n, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::vector<T> v(n);
    for (T& x : v) x = static_cast<T>((rng.uniform() * 2.0 - 1.0) * bound);
    return v;
}

// Registers one residual conv stage's parameters under `prefix`.
template <typename T>
void register_conv_stage(ParamRegistry<T>& reg, const std::string& prefix,
                         std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng) {
    reg.add(prefix + "/conv1_w", {cout, cin, 3, 3, 3},
            lecun_uniform<T>(cout * cin * 27, cin * 27, rng));
    reg.add(prefix + "/conv1_b", {cout}, std::vector<T>(cout, T{}));
    reg.add(prefix + "/in1_g", {cout}, std::vector<T>(cout, T(1)));
    reg.add(prefix + "/in1_b", {cout}, std::vector<T>(cout, T{}));
    reg.add(prefix + "/conv2_w", {cout, cout, 3, 3, 3},
            lecun_uniform<T>(cout * cout * 27, cout * 27, rng));
    reg.add(prefix + "/conv2_b", {cout}, std::vector<T>(cout, T{}));
    reg.add(prefix + "/in2_g", {cout}, std::vector<T>(cout, T(1)));
    reg.add(prefix + "/in2_b", {cout}, std::vector<T>(cout, T{}));
    if (stride != 1 || cin != cout) {
        reg.add(prefix + "/proj_w", {cout, cin, 1, 1, 1},
                lecun_uniform<T>(cout * cin, cin, rng));
        reg.add(prefix + "/proj_b", {cout}, std::vector<T>(cout, T{}));
        reg.add(prefix + "/proj_in_g", {cout}, std::vector<T>(cout, T(1)));
        reg.add(prefix + "/proj_in_b", {cout}, std::vector<T>(cout, T{}));
    }
}

template <typename T>
ad::Tensor<T> conv_stage_forward(ParamRegistry<T>& reg, const std::string& prefix,
                                 const ad::Tensor<T>& x, std::size_t stride) {
    ad::Tensor<T> y = ad::conv3d(x, *reg.find(prefix + "/conv1_w"),
                                 *reg.find(prefix + "/conv1_b"), stride, 1);
    y = ad::relu(ad::instance_norm3d(y, *reg.find(prefix + "/in1_g"),
                                     *reg.find(prefix + "/in1_b")));
    y = ad::conv3d(y, *reg.find(prefix + "/conv2_w"), *reg.find(prefix + "/conv2_b"),
                   std::size_t{1}, 1);
    y = ad::instance_norm3d(y, *reg.find(prefix + "/in2_g"), *reg.find(prefix + "/in2_b"));
    ad::Tensor<T> shortcut = x;
    if (ad::Tensor<T>* pw = reg.find(prefix + "/proj_w")) {
        shortcut = ad::conv3d(x, *pw, *reg.find(prefix + "/proj_b"), stride, 0);
        shortcut = ad::instance_norm3d(shortcut, *reg.find(prefix + "/proj_in_g"),
                                       *reg.find(prefix + "/proj_in_b"));
    }
    return ad::relu(ad::add(y, shortcut));
}

// Decoder stages mirror encoder stages S−1 .. 1. Stage s upsamples by the
// encoder's stride[s], concatenates the skip from stage s−1, and reduces to
// channels[s−1].
template <typename T>
void register_decoder(ParamRegistry<T>& reg, const std::string& model,
                      const std::vector<std::size_t>& channels, std::size_t classes,
                      Rng& rng) {
    for (std::size_t s = channels.size() - 1; s >= 1; --s) {
        const std::size_t cin = channels[s] + channels[s - 1];
        const std::size_t cout = channels[s - 1];
        const std::string prefix = model + "/dec" + std::to_string(s);
        reg.add(prefix + "/conv_w", {cout, cin, 3, 3, 3},
                lecun_uniform<T>(cout * cin * 27, cin * 27, rng));
        reg.add(prefix + "/conv_b", {cout}, std::vector<T>(cout, T{}));
        reg.add(prefix + "/in_g", {cout}, std::vector<T>(cout, T(1)));
        reg.add(prefix + "/in_b", {cout}, std::vector<T>(cout, T{}));
    }
    const std::size_t c_head = channels[0];
    reg.add(model + "/head/w", {classes, c_head, 1, 1, 1},
            lecun_uniform<T>(classes * c_head, c_head, rng));
    reg.add(model + "/head/b", {classes}, std::vector<T>(classes, T{}));
}

template <typename T>
ad::Tensor<T> decoder_forward(ParamRegistry<T>& reg, const std::string& model,
                              ad::Tensor<T> feat, const std::vector<ad::Tensor<T>>& skips,
                              const std::vector<std::size_t>& strides) {
    for (std::size_t s = strides.size() - 1; s >= 1; --s) {
        if (strides[s] > 1) feat = ad::upsample_trilinear(feat, strides[s]);
        feat = ad::concat<T>({feat, skips[s - 1]}, 0);
        const std::string prefix = model + "/dec" + std::to_string(s);
        feat = ad::conv3d(feat, *reg.find(prefix + "/conv_w"),
                          *reg.find(prefix + "/conv_b"), std::size_t{1}, 1);
        feat = ad::relu(ad::instance_norm3d(feat, *reg.find(prefix + "/in_g"),
                                            *reg.find(prefix + "/in_b")));
    }
    return ad::conv3d(feat, *reg.find(model + "/head/w"), *reg.find(model + "/head/b"),
                      std::size_t{1}, 0);
}

}  // namespace detail

/// Image volume as a [1, D, H, W] constant tensor.
template <typename T>
ad::Tensor<T> image_to_tensor(const ImageVolume& v) {
    std::vector<T> data(v.data.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(v.data[i]);
    return ad::Tensor<T>::constant({1, v.dims.d, v.dims.h, v.dims.w}, std::move(data),
                                   "image");
}

/// One-hot labels as a [K, classes] constant tensor, K = voxel count, row
/// order matching the flattened volume.
template <typename T>
ad::Tensor<T> labels_to_onehot(const LabelVolume& labels, std::size_t classes) {
    const std::size_t k = labels.data.size();
    std::vector<T> data(k * classes, T{});
    for (std::size_t i = 0; i < k; ++i) {
        if (labels.data[i] >= classes) {
            throw ad::ShapeMismatch("labels_to_onehot: label " +
                                    std::to_string(int(labels.data[i])) +
                                    " outside class range");
        }
        data[i * classes + labels.data[i]] = T(1);
    }
    return ad::Tensor<T>::constant({k, classes}, std::move(data), "onehot");
}

/// ε-smoothed multi-class Dice loss on logits [classes, D, H, W] against
/// one-hot truth [K, classes]: softmax over the class axis, then
/// 1 − (1/C)·Σ_c (2·Σ p·g + ε)/(Σ p² + Σ g² + ε) with ε = 1e-5; every sum
/// runs over all K voxels.
template <typename T>
ad::Tensor<T> dice_loss(const ad::Tensor<T>& logits, const ad::Tensor<T>& truth_onehot) {
    if (logits.shape().size() != 4) {
        throw ad::ShapeMismatch("dice_loss: logits " + ad::shape_str(logits.shape()));
    }
    const std::size_t classes = logits.shape()[0];
    const std::size_t k = logits.shape()[1] * logits.shape()[2] * logits.shape()[3];
    if (truth_onehot.shape() != ad::Shape{k, classes}) {
        throw ad::ShapeMismatch("dice_loss: truth " + ad::shape_str(truth_onehot.shape()) +
                                " vs expected [" + std::to_string(k) + ", " +
                                std::to_string(classes) + "]");
    }
    constexpr T eps = T(1e-5);
    ad::Tensor<T> p = ad::softmax(ad::transpose2d(ad::reshape(logits, {classes, k})));
    ad::Tensor<T> inter = ad::colsum(ad::mul(p, truth_onehot));            // [classes]
    ad::Tensor<T> psq = ad::colsum(ad::mul(p, p));                         // [classes]
    ad::Tensor<T> gsq = ad::colsum(ad::mul(truth_onehot, truth_onehot));   // [classes]
    ad::Tensor<T> num = ad::add_scalar(ad::scale(inter, T(2)), eps);
    ad::Tensor<T> den = ad::add_scalar(ad::add(psq, gsq), eps);
    ad::Tensor<T> per_class = ad::div(num, den);
    return ad::add_scalar(ad::scale(ad::sum(per_class), -T(1) / T(classes)), T(1));
}

/// Argmax over the class axis of logits [classes, D, H, W]; exact ties go to
/// the lower class index.
template <typename T>
LabelVolume logits_to_labels(const ad::Tensor<T>& logits, const Vec3& spacing) {
    const std::size_t classes = logits.shape()[0];
    const Dims dims{logits.shape()[1], logits.shape()[2], logits.shape()[3]};
    LabelVolume out(dims, spacing);
    const std::size_t k = dims.voxels();
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t best = 0;
        T best_v = logits.value()[i];
        for (std::size_t c = 1; c < classes; ++c) {
            const T v = logits.value()[c * k + i];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        out.data[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

template <typename T>
class LiverFormer {
  public:
    using scalar_type = T;

    LiverFormer(LiverFormerConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const auto& ch = cfg_.encoder_channels;
        std::size_t cin = cfg_.in_channels;
        for (std::size_t s = 0; s < ch.size(); ++s) {
            detail::register_conv_stage(reg_, "liverformer/enc" + std::to_string(s), cin,
                                        ch[s], cfg_.encoder_strides[s], rng);
            cin = ch[s];
        }
        const std::size_t p3 = cfg_.patch_size * cfg_.patch_size * cfg_.patch_size;
        const std::size_t token_width = ch.back() * p3;
        const std::size_t n_tokens = cfg_.token_count();
        reg_.add("liverformer/embed/H_w", {token_width, cfg_.hidden_dim},
                 detail::lecun_uniform<T>(token_width * cfg_.hidden_dim, token_width, rng));
        reg_.add("liverformer/embed/H_pos", {n_tokens, cfg_.hidden_dim},
                 std::vector<T>(n_tokens * cfg_.hidden_dim, T{}));
        for (std::size_t l = 0; l < cfg_.transformer_layers; ++l) {
            const std::string p = "liverformer/tf" + std::to_string(l);
            const std::size_t d = cfg_.hidden_dim, m = d * cfg_.mlp_ratio;
            reg_.add(p + "/ln1_g", {d}, std::vector<T>(d, T(1)));
            reg_.add(p + "/ln1_b", {d}, std::vector<T>(d, T{}));
            reg_.add(p + "/wq", {d, d}, detail::lecun_uniform<T>(d * d, d, rng));
            reg_.add(p + "/wk", {d, d}, detail::lecun_uniform<T>(d * d, d, rng));
            reg_.add(p + "/wv", {d, d}, detail::lecun_uniform<T>(d * d, d, rng));
            reg_.add(p + "/wo", {d, d}, detail::lecun_uniform<T>(d * d, d, rng));
            reg_.add(p + "/ln2_g", {d}, std::vector<T>(d, T(1)));
            reg_.add(p + "/ln2_b", {d}, std::vector<T>(d, T{}));
            reg_.add(p + "/mlp_w1", {d, m}, detail::lecun_uniform<T>(d * m, d, rng));
            reg_.add(p + "/mlp_b1", {m}, std::vector<T>(m, T{}));
            reg_.add(p + "/mlp_w2", {m, d}, detail::lecun_uniform<T>(m * d, m, rng));
            reg_.add(p + "/mlp_b2", {d}, std::vector<T>(d, T{}));
        }
        reg_.add("liverformer/dec/reproj_w", {cfg_.hidden_dim, token_width},
                 detail::lecun_uniform<T>(cfg_.hidden_dim * token_width, cfg_.hidden_dim,
                                          rng));
        reg_.add("liverformer/dec/reproj_b", {token_width},
                 std::vector<T>(token_width, T{}));
        detail::register_decoder(reg_, "liverformer", ch, cfg_.classes, rng);
    }

    struct EncoderOut {
        ad::Tensor<T> final;
        std::vector<ad::Tensor<T>> skips;  // outputs of all stages but the last
    };

    EncoderOut encoder_forward(const ad::Tensor<T>& x) {
        EncoderOut out;
        ad::Tensor<T> feat = x;
        for (std::size_t s = 0; s < cfg_.encoder_channels.size(); ++s) {
            feat = detail::conv_stage_forward(reg_, "liverformer/enc" + std::to_string(s),
                                              feat, cfg_.encoder_strides[s]);
            if (s + 1 < cfg_.encoder_channels.size()) out.skips.push_back(feat);
        }
        out.final = feat;
        return out;
    }

    /// Flatten P³ patches, project bias-free, add the positional table
    /// exactly once.
    ad::Tensor<T> patchify_embed(const ad::Tensor<T>& features) {
        ad::Tensor<T> tokens = ad::patchify(features, cfg_.patch_size);
        if (tokens.shape()[0] != cfg_.token_count()) {
            throw ad::ShapeMismatch("patchify_embed: " + std::to_string(tokens.shape()[0]) +
                                    " tokens, positional table has " +
                                    std::to_string(cfg_.token_count()));
        }
        ad::Tensor<T> z = ad::linear(tokens, *reg_.find("liverformer/embed/H_w"));
        return ad::add(z, *reg_.find("liverformer/embed/H_pos"));
    }

    ad::Tensor<T> transformer_layer(const ad::Tensor<T>& z, std::size_t l) {
        const std::string p = "liverformer/tf" + std::to_string(l);
        ad::Tensor<T> normed =
            ad::layer_norm(z, *reg_.find(p + "/ln1_g"), *reg_.find(p + "/ln1_b"));
        ad::Tensor<T> attended = ad::multi_head_attention(
            normed, cfg_.heads, *reg_.find(p + "/wq"), *reg_.find(p + "/wk"),
            *reg_.find(p + "/wv"), *reg_.find(p + "/wo"));
        ad::Tensor<T> zp = ad::add(attended, z);
        ad::Tensor<T> normed2 =
            ad::layer_norm(zp, *reg_.find(p + "/ln2_g"), *reg_.find(p + "/ln2_b"));
        ad::Tensor<T> mlp = ad::linear(normed2, *reg_.find(p + "/mlp_w1"),
                                       *reg_.find(p + "/mlp_b1"));
        mlp = ad::linear(ad::gelu(mlp), *reg_.find(p + "/mlp_w2"),
                         *reg_.find(p + "/mlp_b2"));
        return ad::add(mlp, zp);
    }

    ad::Tensor<T> transformer_forward(ad::Tensor<T> z) {
        for (std::size_t l = 0; l < cfg_.transformer_layers; ++l) {
            z = transformer_layer(z, l);
        }
        return z;
    }

    ad::Tensor<T> decoder_forward(const ad::Tensor<T>& tokens,
                                  const std::vector<ad::Tensor<T>>& skips) {
        ad::Tensor<T> re = ad::linear(tokens, *reg_.find("liverformer/dec/reproj_w"),
                                      *reg_.find("liverformer/dec/reproj_b"));
        const Dims tg = cfg_.token_grid();
        const std::size_t p = cfg_.patch_size;
        ad::Tensor<T> feat = ad::unpatchify(
            re, {cfg_.encoder_channels.back(), tg.d * p, tg.h * p, tg.w * p}, p);
        return detail::decoder_forward(reg_, "liverformer", feat, skips,
                                       cfg_.encoder_strides);
    }

    /// Full pass: [1, D, H, W] → logits [classes, D, H, W].
    ad::Tensor<T> forward(const ad::Tensor<T>& x) {
        EncoderOut enc = encoder_forward(x);
        ad::Tensor<T> z = transformer_forward(patchify_embed(enc.final));
        return decoder_forward(z, enc.skips);
    }

    LabelVolume predict(const ImageVolume& image) {
        require_same_dims(image.dims, cfg_.input_dims, "predict");
        ad::Tensor<T> logits = forward(image_to_tensor<T>(image));
        return logits_to_labels(logits, image.spacing);
    }

    ParamRegistry<T>& params() { return reg_; }
    const LiverFormerConfig& config() const { return cfg_; }

  private:
    LiverFormerConfig cfg_;
    ParamRegistry<T> reg_;
};

/// Minimal 3D U-Net: the same residual encoder and upsample-concat-conv
/// decoder, without the token/transformer stage. Transformer-specific config
/// fields are ignored; parameter names live under the "unet3d/" prefix so
/// the two registries never collide.
template <typename T>
class UNet3D {
  public:
    using scalar_type = T;

    UNet3D(LiverFormerConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const auto& ch = cfg_.encoder_channels;
        std::size_t cin = cfg_.in_channels;
        for (std::size_t s = 0; s < ch.size(); ++s) {
            detail::register_conv_stage(reg_, "unet3d/enc" + std::to_string(s), cin, ch[s],
                                        cfg_.encoder_strides[s], rng);
            cin = ch[s];
        }
        detail::register_decoder(reg_, "unet3d", ch, cfg_.classes, rng);
    }

    ad::Tensor<T> forward(const ad::Tensor<T>& x) {
        std::vector<ad::Tensor<T>> skips;
        ad::Tensor<T> feat = x;
        for (std::size_t s = 0; s < cfg_.encoder_channels.size(); ++s) {
            feat = detail::conv_stage_forward(reg_, "unet3d/enc" + std::to_string(s), feat,
                                              cfg_.encoder_strides[s]);
            if (s + 1 < cfg_.encoder_channels.size()) skips.push_back(feat);
        }
        return detail::decoder_forward(reg_, "unet3d", feat, skips, cfg_.encoder_strides);
    }

    LabelVolume predict(const ImageVolume& image) {
        require_same_dims(image.dims, cfg_.input_dims, "predict");
        ad::Tensor<T> logits = forward(image_to_tensor<T>(image));
        return logits_to_labels(logits, image.spacing);
    }

    ParamRegistry<T>& params() { return reg_; }
    const LiverFormerConfig& config() const { return cfg_; }

  private:
    LiverFormerConfig cfg_;
    ParamRegistry<T> reg_;
};

}  // namespace liverformer
