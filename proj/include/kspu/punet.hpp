#pragma once

#include <chrono>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kspu/data.hpp"
#include "kspu/equivariant.hpp"
#include "kspu/errors.hpp"
#include "kspu/metrics.hpp"
#include "kspu/nn.hpp"
#include "kspu/rng.hpp"
#include "kspu/shape_space.hpp"
#include "kspu/tensor.hpp"
#include "kspu/vmf.hpp"

// The Kendall Shape Probabilistic U-Net: a plain U-Net trunk, equivariant
// prior/posterior networks that emit an orientation R, a mean shape M and a
// concentration kappa, the vMF latent construction mu0 = psi(R^{-1} M) on
// S^{(k-1)m-1}, the composed loss (reconstruction + beta KL + gamma weight
// regularization), training, sampling and evaluation.
namespace kspu::punet {

struct ModelConfig {
    int image_size = 64;
    int unet_depth = 3;
    int base_channels = 16;
    int classes = 2;  // background/foreground
    int k = 4;
    int m = 2;
    int group_order = 8;
    double beta = 1.0;
    double gamma = 1.0;
    double weight_decay_scale = 1e-5;
    double kappa_min = 0.1;
    double learning_rate = 1e-3;
    int epochs = 30;
    std::uint64_t seed = 0;
    std::string kl_mode = "bound";  // "bound" or "monte_carlo"
    int kl_mc_samples = 8;

    int latent_dim() const { return (k - 1) * m; }

    void validate() const {
        if (m != 2) throw InvalidConfig("ModelConfig: only m = 2 is supported");
        if (classes != 2) throw InvalidConfig("ModelConfig: only 2 classes are supported");
        if (k < 3) throw InvalidConfig("ModelConfig: k must be >= 3");
        if (group_order < 4 || group_order % 4 != 0)
            throw InvalidConfig("ModelConfig: group order must be a positive multiple of 4");
        if (unet_depth < 1) throw InvalidConfig("ModelConfig: unet_depth must be >= 1");
        if (image_size < 8 || image_size % (1 << unet_depth) != 0 || image_size % 4 != 0)
            throw InvalidConfig("ModelConfig: image_size must be divisible by 2^unet_depth and 4");
        if (base_channels < 1) throw InvalidConfig("ModelConfig: base_channels must be >= 1");
        if (epochs < 0) throw InvalidConfig("ModelConfig: epochs must be >= 0");
        if (kl_mode != "bound" && kl_mode != "monte_carlo")
            throw InvalidConfig("ModelConfig: kl_mode must be 'bound' or 'monte_carlo'");
        if (kappa_min < vmf::kKappaMin || kappa_min >= vmf::kKappaMax)
            throw InvalidConfig("ModelConfig: kappa_min out of range");
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size},
                {"unet_depth", unet_depth},
                {"base_channels", base_channels},
                {"classes", classes},
                {"k", k},
                {"m", m},
                {"group_order", group_order},
                {"beta", beta},
                {"gamma", gamma},
                {"weight_decay_scale", weight_decay_scale},
                {"kappa_min", kappa_min},
                {"learning_rate", learning_rate},
                {"epochs", epochs},
                {"seed", seed},
                {"kl_mode", kl_mode},
                {"kl_mc_samples", kl_mc_samples}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig cfg;
        cfg.image_size = j.at("image_size");
        cfg.unet_depth = j.at("unet_depth");
        cfg.base_channels = j.at("base_channels");
        cfg.classes = j.at("classes");
        cfg.k = j.at("k");
        cfg.m = j.at("m");
        cfg.group_order = j.at("group_order");
        cfg.beta = j.at("beta");
        cfg.gamma = j.at("gamma");
        cfg.weight_decay_scale = j.at("weight_decay_scale");
        cfg.kappa_min = j.at("kappa_min");
        cfg.learning_rate = j.at("learning_rate");
        cfg.epochs = j.at("epochs");
        cfg.seed = j.at("seed");
        cfg.kl_mode = j.at("kl_mode");
        cfg.kl_mc_samples = j.at("kl_mc_samples");
        cfg.validate();
        return cfg;
    }
};

// Frozen randomness of one latent draw; passing these explicitly makes the
// loss a deterministic function of the parameters (used by gradient checks;
// consistent with treating the axial coordinate w as constant).
struct LatentNoise {
    double w = 1.0;
    Eigen::VectorXd tangent;
};

// Result of the prior or posterior network on one image.
template <typename T>
struct LatentResult {
    nn::Tensor<T> mu;     // (d) unit mean direction, differentiable
    nn::Tensor<T> kappa;  // (1) concentration, differentiable
    nn::Tensor<T> orient_x, orient_y;        // raw frequency-1 orientation vector v
    nn::Tensor<T> raw_shape_x, raw_shape_y;  // unprojected mean-shape rows, length k
    double angle = 0.0;                // atan2(v_y, v_x); 0 on fallback
    bool identity_fallback = false;    // ||v|| below threshold
    bool reference_shape = false;      // degenerate M replaced by regular k-gon

    vmf::VmfParams to_vmf() const {
        Eigen::VectorXd mu_d(mu.numel());
        for (int i = 0; i < mu.numel(); ++i) mu_d[i] = static_cast<double>(mu.value()[i]);
        mu_d /= mu_d.norm();
        const double kap = std::clamp(static_cast<double>(kappa.value()[0]), vmf::kKappaMin,
                                      vmf::kKappaMax);
        return vmf::VmfParams(mu_d, kap);
    }
};

template <typename T>
struct LossResult {
    nn::Tensor<T> total;
    double reconstruction = 0.0, kl = 0.0, weight = 0.0;
};

template <typename T>
class KendallPUNet {
public:
    explicit KendallPUNet(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParameterStore<T>& params() { return store_; }

    // ---- networks -------------------------------------------------------------

    // Plain conv U-Net; returns a base_channels feature map at full resolution.
    nn::Tensor<T> unet_forward(const nn::Tensor<T>& image) {
        if (image.shape().size() != 3 || image.shape()[0] != 1)
            throw ShapeMismatch("unet_forward: expected a (1,h,w) image");
        if (image.shape()[1] % (1 << cfg_.unet_depth) != 0)
            throw ShapeMismatch("unet_forward: size not divisible by 2^depth");
        std::vector<nn::Tensor<T>> skips;
        nn::Tensor<T> x = image;
        for (int level = 0; level < cfg_.unet_depth; ++level) {
            x = conv_block(x, "unet.enc" + std::to_string(level));
            skips.push_back(x);
            x = nn::avg_pool2(x);
        }
        x = conv_block(x, "unet.bottleneck");
        for (int level = cfg_.unet_depth - 1; level >= 0; --level) {
            x = nn::upsample_nearest2(x);
            x = nn::concat_channels(skips[level], x);
            x = conv_block(x, "unet.dec" + std::to_string(level));
        }
        return x;
    }

    // Prior (image only) or posterior (image plus mask channel) latent head.
    LatentResult<T> latent_distribution(const nn::Tensor<T>& image,
                                        const nn::Tensor<T>* mask = nullptr) {
        const std::string net = mask ? "posterior" : "prior";
        nn::Tensor<T> input = mask ? nn::concat_channels(image, *mask) : image;
        const eq::SteerableBasis& b1 = mask ? post_basis1_ : prior_basis1_;

        nn::Tensor<T> h = steer_layer(input, b1, net + ".conv1", hidden1_);
        h = nn::avg_pool2(h);
        h = steer_layer(h, basis2_, net + ".conv2", hidden2_);
        h = nn::avg_pool2(h);
        nn::Tensor<T> head = steer_layer(h, head_basis_, net + ".head", head_ft_);

        // Spatially averaged fields: v and the raw mean-shape columns
        // transform as frequency-1 vectors; the pooled invariants feed kappa.
        nn::Tensor<T> means = nn::spatial_mean(head);
        const int v_off = kappa_field_count_;  // channels: [f0 x count, f1 x (1+k)]
        LatentResult<T> out;
        out.orient_x = nn::slice_vec(means, v_off, 1);
        out.orient_y = nn::slice_vec(means, v_off + 1, 1);
        std::vector<nn::Tensor<T>> mx, my;
        for (int j = 0; j < cfg_.k; ++j) {
            mx.push_back(nn::slice_vec(means, v_off + 2 + 2 * j, 1));
            my.push_back(nn::slice_vec(means, v_off + 2 + 2 * j + 1, 1));
        }
        nn::Tensor<T> raw_x = nn::stack_scalars(mx);
        nn::Tensor<T> raw_y = nn::stack_scalars(my);
        out.raw_shape_x = raw_x;
        out.raw_shape_y = raw_y;

        // kappa = softplus(dense(pooled)) + kappa_min, clamped at kappa_max.
        nn::Tensor<T> pooled = eq::invariant_pool(head, head_ft_);
        nn::Tensor<T> kappa_raw =
            nn::linear(pooled, store_.at(net + ".kappa.w"), store_.at(net + ".kappa.b"));
        nn::Tensor<T> kappa = nn::add_const(nn::softplus(kappa_raw), static_cast<T>(cfg_.kappa_min));
        out.kappa = nn::clamp_max(kappa, static_cast<T>(vmf::kKappaMax));

        // Center and scale the raw mean shape onto the pre-shape sphere.
        nn::Tensor<T> cx = nn::sub(raw_x, nn::mul_bscalar(ones_k_, nn::reduce_mean(raw_x)));
        nn::Tensor<T> cy = nn::sub(raw_y, nn::mul_bscalar(ones_k_, nn::reduce_mean(raw_y)));
        nn::Tensor<T> norm = nn::sqrt(
            nn::add(nn::reduce_sum(nn::mul(cx, cx)), nn::reduce_sum(nn::mul(cy, cy))));
        nn::Tensor<T> px, py;
        if (static_cast<double>(norm.value()[0]) < 1e-9) {
            if (!warned_degenerate_) {
                std::fprintf(stderr,
                             "kspu: warning: degenerate mean shape, using the regular %d-gon\n",
                             cfg_.k);
                warned_degenerate_ = true;
            }
            out.reference_shape = true;
            px = ref_shape_x_;
            py = ref_shape_y_;
        } else {
            px = nn::div_bscalar(cx, norm);
            py = nn::div_bscalar(cy, norm);
        }

        // Orientation standardization M0 = R^{-1} M with R = rot(atan2(vy,vx));
        // row0' = cos r row0 + sin r row1, row1' = -sin r row0 + cos r row1.
        const double vx = out.orient_x.value()[0], vy = out.orient_y.value()[0];
        nn::Tensor<T> m0x, m0y;
        if (std::hypot(vx, vy) < 1e-6) {
            out.identity_fallback = true;
            out.angle = 0.0;
            m0x = px;
            m0y = py;
        } else {
            out.angle = std::atan2(vy, vx);
            nn::Tensor<T> vnorm = nn::sqrt(nn::add(nn::mul(out.orient_x, out.orient_x),
                                                   nn::mul(out.orient_y, out.orient_y)));
            nn::Tensor<T> cosr = nn::div(out.orient_x, vnorm);
            nn::Tensor<T> sinr = nn::div(out.orient_y, vnorm);
            m0x = nn::add(nn::mul_bscalar(px, cosr), nn::mul_bscalar(py, sinr));
            m0y = nn::sub(nn::mul_bscalar(py, cosr), nn::mul_bscalar(px, sinr));
        }

        // mu0 = psi(M0) = vec(M0 H^T)/||.||; interleave matches column-major vec.
        nn::Tensor<T> yx = nn::reshape(nn::matmul(nn::reshape(m0x, {1, cfg_.k}), helmert_t_),
                                       {cfg_.k - 1});
        nn::Tensor<T> yy = nn::reshape(nn::matmul(nn::reshape(m0y, {1, cfg_.k}), helmert_t_),
                                       {cfg_.k - 1});
        nn::Tensor<T> vec = nn::interleave2(yx, yy);
        out.mu = nn::div_bscalar(vec, nn::sqrt(nn::reduce_sum(nn::mul(vec, vec))));
        return out;
    }

    // z broadcast to every pixel, concatenated with the U-Net features, then
    // three 1x1 conv layers down to the foreground logit.
    nn::Tensor<T> combine(const nn::Tensor<T>& features, const nn::Tensor<T>& z) {
        if (z.numel() != cfg_.latent_dim()) throw ShapeMismatch("combine: bad latent length");
        const int h = features.shape()[1], w = features.shape()[2];
        nn::Tensor<T> x = nn::concat_channels(features, nn::broadcast_spatial(z, h, w));
        x = nn::relu(conv1x1(x, "combine.c1"));
        x = nn::relu(conv1x1(x, "combine.c2"));
        return conv1x1(x, "combine.c3");
    }

    // Differentiable reflection of the north-pole frame onto mu: the sampled
    // axial coordinate w and tangential direction are constants, the
    // Householder alignment carries the gradient.
    nn::Tensor<T> reparameterized_sample(const LatentResult<T>& q, const LatentNoise& noise) {
        const int d = cfg_.latent_dim();
        if (noise.tangent.size() != d - 1)
            throw DimensionMismatch("reparameterized_sample: tangent length must be d-1");
        std::vector<T> raw(d);
        raw[0] = static_cast<T>(noise.w);
        const double r = std::sqrt(std::max(0.0, 1.0 - noise.w * noise.w));
        for (int i = 1; i < d; ++i) raw[i] = static_cast<T>(r * noise.tangent[i - 1]);
        nn::Tensor<T> z_raw = nn::Tensor<T>::from({d}, std::move(raw));
        nn::Tensor<T> u = nn::sub(e1_, q.mu);
        const double un2 = [&] {
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += static_cast<double>(u.value()[i]) * u.value()[i];
            return acc;
        }();
        if (un2 < 1e-12) return z_raw;  // mu at the north pole: alignment is identity
        nn::Tensor<T> coef =
            nn::div(nn::scale(nn::dot(u, z_raw), T(2)), nn::reduce_sum(nn::mul(u, u)));
        return nn::sub(z_raw, nn::mul_bscalar(u, coef));
    }

    LatentNoise draw_noise(double kappa, Rng& rng) const {
        LatentNoise noise;
        noise.w = vmf::sample_axial(cfg_.latent_dim(), kappa, rng);
        noise.tangent = vmf::sample_unit_tangent(cfg_.latent_dim(), rng);
        return noise;
    }

    // KL(q || p) as a differentiable graph. "bound" uses the closed-form
    // upper bound (the training default); "monte_carlo" averages density
    // ratios over frozen latent draws.
    nn::Tensor<T> kl_term(const LatentResult<T>& q, const LatentResult<T>& p,
                          const std::vector<LatentNoise>& mc_noise) {
        if (cfg_.kl_mode == "bound") return kl_bound_graph(q, p);
        nn::Tensor<T> acc;
        for (const auto& noise : mc_noise) {
            nn::Tensor<T> z = reparameterized_sample(q, noise);
            nn::Tensor<T> term = nn::sub(
                nn::add(log_normalizer_graph(q.kappa), nn::mul(q.kappa, nn::dot(q.mu, z))),
                nn::add(log_normalizer_graph(p.kappa), nn::mul(p.kappa, nn::dot(p.mu, z))));
            acc = acc.defined() ? nn::add(acc, term) : term;
        }
        return nn::scale(acc, static_cast<T>(1.0 / mc_noise.size()));
    }

    // Eq.-style composite loss on one image with one annotator mask:
    // pixel-mean BCE with a single Monte-Carlo z ~ Q, plus beta * KL(Q||P),
    // plus gamma * (weight_decay_scale * mean squared weight).
    LossResult<T> loss(const data::SegSample& sample, int mask_index, Rng* rng,
                       const std::vector<LatentNoise>* fixed_noise = nullptr) {
        nn::Tensor<T> image = image_tensor(sample.image, sample.height, sample.width);
        nn::Tensor<T> mask = mask_tensor(sample.masks.at(mask_index));
        LatentResult<T> prior = latent_distribution(image);
        LatentResult<T> posterior = latent_distribution(image, &mask);

        const int mc = (cfg_.kl_mode == "monte_carlo") ? cfg_.kl_mc_samples : 0;
        std::vector<LatentNoise> noise;
        if (fixed_noise) {
            noise = *fixed_noise;
            if (static_cast<int>(noise.size()) < 1 + mc)
                throw InvalidConfig("loss: not enough fixed noise draws");
        } else {
            if (!rng) throw InvalidConfig("loss: need an rng or fixed noise");
            const double kq = static_cast<double>(posterior.kappa.value()[0]);
            for (int i = 0; i < 1 + mc; ++i)
                noise.push_back(draw_noise(std::clamp(kq, vmf::kKappaMin, vmf::kKappaMax), *rng));
        }

        nn::Tensor<T> z = reparameterized_sample(posterior, noise[0]);
        nn::Tensor<T> logits = combine(unet_forward(image), z);
        nn::Tensor<T> recon = nn::bce_with_logits_mean(logits, mask);

        std::vector<LatentNoise> mc_noise(noise.begin() + 1, noise.end());
        nn::Tensor<T> kl = kl_term(posterior, prior, mc_noise);

        nn::Tensor<T> sq;
        for (auto& [name, t] : store_.params()) {
            nn::Tensor<T> s = nn::reduce_sum(nn::mul(t, t));
            sq = sq.defined() ? nn::add(sq, s) : s;
        }
        nn::Tensor<T> weight = nn::scale(
            sq, static_cast<T>(cfg_.weight_decay_scale / static_cast<double>(store_.total_count())));

        nn::Tensor<T> total = nn::add(
            recon, nn::add(nn::scale(kl, static_cast<T>(cfg_.beta)),
                           nn::scale(weight, static_cast<T>(cfg_.gamma))));
        LossResult<T> out;
        out.total = total;
        out.reconstruction = static_cast<double>(recon.value()[0]);
        out.kl = static_cast<double>(kl.value()[0]);
        out.weight = static_cast<double>(weight.value()[0]);
        return out;
    }

    // n segmentation masks sampled from the prior latent distribution.
    // kappa_override > 0 substitutes the concentration (diagnostic mode).
    std::vector<metrics::Mask> sample_segmentations(const std::vector<double>& image, int n,
                                                    Rng& rng, double kappa_override = 0.0) {
        nn::Tensor<T> img = image_tensor(image, cfg_.image_size, cfg_.image_size);
        LatentResult<T> prior = latent_distribution(img);
        vmf::VmfParams params = prior.to_vmf();
        if (kappa_override > 0.0)
            params = vmf::VmfParams(params.mu, std::clamp(kappa_override, vmf::kKappaMin,
                                                          vmf::kKappaMax));
        nn::Tensor<T> features = unet_forward(img);
        std::vector<metrics::Mask> out;
        for (const Eigen::VectorXd& z : vmf::sample(params, n, rng)) {
            std::vector<T> zv(z.size());
            for (int i = 0; i < z.size(); ++i) zv[i] = static_cast<T>(z[i]);
            nn::Tensor<T> logits =
                combine(features, nn::Tensor<T>::from({cfg_.latent_dim()}, std::move(zv)));
            metrics::Mask mask(logits.numel());
            for (int i = 0; i < logits.numel(); ++i) mask[i] = logits.value()[i] > T(0) ? 1 : 0;
            out.push_back(std::move(mask));
        }
        return out;
    }

    // ---- persistence ------------------------------------------------------------

    void save(const std::filesystem::path& path) const {
        nn::save_checkpoint(store_, nlohmann::json{{"config", cfg_.to_json()}}, path);
    }

    static KendallPUNet load(const std::filesystem::path& path) {
        auto [loaded, header] = nn::load_checkpoint<T>(path);
        if (!header.contains("config"))
            throw CheckpointMismatch("load: checkpoint header has no model config");
        KendallPUNet model(ModelConfig::from_json(header.at("config")));
        for (auto& [name, t] : model.store_.params()) {
            auto it = loaded.params().find(name);
            if (it == loaded.params().end())
                throw CheckpointMismatch("load: checkpoint is missing parameter '" + name + "'");
            if (it->second.shape() != t.shape())
                throw CheckpointMismatch("load: shape mismatch for parameter '" + name + "'");
            t.mutable_value() = it->second.value();
        }
        if (loaded.params().size() != model.store_.params().size())
            throw CheckpointMismatch("load: checkpoint has extra parameters");
        return model;
    }

    // ---- tensors from raw data ----------------------------------------------------

    nn::Tensor<T> image_tensor(const std::vector<double>& image, int h, int w) const {
        if (static_cast<int>(image.size()) != h * w)
            throw ShapeMismatch("image_tensor: size mismatch");
        std::vector<T> v(image.size());
        for (size_t i = 0; i < image.size(); ++i) v[i] = static_cast<T>(image[i]);
        return nn::Tensor<T>::from({1, h, w}, std::move(v));
    }

    nn::Tensor<T> mask_tensor(const metrics::Mask& mask) const {
        std::vector<T> v(mask.size());
        for (size_t i = 0; i < mask.size(); ++i) v[i] = static_cast<T>(mask[i]);
        const int h = cfg_.image_size;
        if (static_cast<int>(mask.size()) != h * h) throw ShapeMismatch("mask_tensor: size mismatch");
        return nn::Tensor<T>::from({1, h, h}, std::move(v));
    }

    const eq::FieldType& head_field_type() const { return head_ft_; }

private:
    // Channel width at encoder level i, capped at 4x base.
    int level_channels(int level) const { return cfg_.base_channels * std::min(1 << level, 4); }

    void build() {
        const int n = cfg_.group_order;
        const eq::Irrep f0(n, 0), f1(n, 1);
        prior_in_ = eq::FieldType::repeated(f0, 1);
        post_in_ = eq::FieldType::repeated(f0, 2);
        std::vector<eq::Irrep> h1(6, f0);
        h1.insert(h1.end(), 6, f1);
        hidden1_ = eq::FieldType(h1);
        std::vector<eq::Irrep> h2(8, f0);
        h2.insert(h2.end(), 8, f1);
        hidden2_ = eq::FieldType(h2);
        kappa_field_count_ = 8;
        std::vector<eq::Irrep> head(kappa_field_count_, f0);
        head.insert(head.end(), 1 + cfg_.k, f1);
        head_ft_ = eq::FieldType(head);

        prior_basis1_ = eq::build_layer_basis(prior_in_, hidden1_, 5, n);
        post_basis1_ = eq::build_layer_basis(post_in_, hidden1_, 5, n);
        basis2_ = eq::build_layer_basis(hidden1_, hidden2_, 5, n);
        head_basis_ = eq::build_layer_basis(hidden2_, head_ft_, 5, n);

        Rng rng(derive_seed(cfg_.seed, 0x696e6974ULL));  // "init"

        // U-Net.
        int in_ch = 1;
        for (int level = 0; level < cfg_.unet_depth; ++level) {
            add_conv_block("unet.enc" + std::to_string(level), in_ch, level_channels(level), rng);
            in_ch = level_channels(level);
        }
        add_conv_block("unet.bottleneck", in_ch, level_channels(cfg_.unet_depth), rng);
        int up_ch = level_channels(cfg_.unet_depth);
        for (int level = cfg_.unet_depth - 1; level >= 0; --level) {
            add_conv_block("unet.dec" + std::to_string(level), level_channels(level) + up_ch,
                           level_channels(level), rng);
            up_ch = level_channels(level);
        }

        // Prior and posterior trunks.
        add_steer_layer("prior.conv1", prior_basis1_, hidden1_, rng);
        add_steer_layer("prior.conv2", basis2_, hidden2_, rng);
        add_steer_layer("prior.head", head_basis_, head_ft_, rng);
        add_kappa_head("prior", rng);
        add_steer_layer("posterior.conv1", post_basis1_, hidden1_, rng);
        add_steer_layer("posterior.conv2", basis2_, hidden2_, rng);
        add_steer_layer("posterior.head", head_basis_, head_ft_, rng);
        add_kappa_head("posterior", rng);

        // Combination head; the final layer is zero-initialized so untrained
        // logits are exactly zero.
        const int comb_in = cfg_.base_channels + cfg_.latent_dim();
        add_1x1("combine.c1", comb_in, cfg_.base_channels, rng, false);
        add_1x1("combine.c2", cfg_.base_channels, cfg_.base_channels, rng, false);
        add_1x1("combine.c3", cfg_.base_channels, 1, rng, true);

        // Constants shared by the latent pipeline.
        const Eigen::MatrixXd helmert = shape::helmert_submatrix(cfg_.k);
        std::vector<T> ht(static_cast<size_t>(cfg_.k) * (cfg_.k - 1));
        for (int r = 0; r < cfg_.k; ++r)
            for (int c = 0; c < cfg_.k - 1; ++c)
                ht[static_cast<size_t>(r) * (cfg_.k - 1) + c] = static_cast<T>(helmert(c, r));
        helmert_t_ = nn::Tensor<T>::from({cfg_.k, cfg_.k - 1}, std::move(ht));
        ones_k_ = nn::Tensor<T>::full({cfg_.k}, T(1));
        e1_ = nn::Tensor<T>::zeros({cfg_.latent_dim()});
        e1_.mutable_value()[0] = T(1);

        // Regular k-gon fallback pre-shape (unit Frobenius norm).
        std::vector<T> rx(cfg_.k), ry(cfg_.k);
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.k));
        for (int j = 0; j < cfg_.k; ++j) {
            rx[j] = static_cast<T>(scale * std::cos(2.0 * M_PI * j / cfg_.k));
            ry[j] = static_cast<T>(scale * std::sin(2.0 * M_PI * j / cfg_.k));
        }
        ref_shape_x_ = nn::Tensor<T>::from({cfg_.k}, std::move(rx));
        ref_shape_y_ = nn::Tensor<T>::from({cfg_.k}, std::move(ry));
    }

    void add_conv_block(const std::string& prefix, int cin, int cout, Rng& rng) {
        store_.add(prefix + ".c1.w", nn::he_conv_init<T>(cout, cin, 3, 3, rng));
        store_.add(prefix + ".c1.b", nn::Tensor<T>::zeros({cout}, true));
        store_.add(prefix + ".c2.w", nn::he_conv_init<T>(cout, cout, 3, 3, rng));
        store_.add(prefix + ".c2.b", nn::Tensor<T>::zeros({cout}, true));
    }

    void add_1x1(const std::string& name, int cin, int cout, Rng& rng, bool zero_init) {
        if (zero_init) {
            store_.add(name + ".w", nn::Tensor<T>::zeros({cout, cin, 1, 1}, true));
        } else {
            store_.add(name + ".w", nn::he_conv_init<T>(cout, cin, 1, 1, rng));
        }
        store_.add(name + ".b", nn::Tensor<T>::zeros({cout}, true));
    }

    void add_steer_layer(const std::string& name, const eq::SteerableBasis& basis,
                         const eq::FieldType& out_ft, Rng& rng) {
        // Per-layer He-style scale: E[sum_j w_j^2 ||B_j[o]||^2] ~ 2 per output
        // channel for unit-variance inputs.
        double total_sq = 0.0;
        for (const auto& e : basis.elements)
            for (double v : e.cart) total_sq += v * v;
        const double per_out = total_sq / std::max(1, out_ft.total_dim());
        const double stddev = per_out > 0 ? std::sqrt(2.0 / per_out) : 0.0;
        store_.add(name + ".w", nn::normal_init<T>({basis.dimension()}, stddev, rng));
        store_.add(name + ".b", nn::Tensor<T>::zeros({out_ft.total_dim()}, true));
    }

    void add_kappa_head(const std::string& net, Rng& rng) {
        const int n_inv = static_cast<int>(head_ft_.irreps.size());
        store_.add(net + ".kappa.w",
                   nn::normal_init<T>({1, n_inv}, 1.0 / std::sqrt(static_cast<double>(n_inv)), rng));
        store_.add(net + ".kappa.b", nn::Tensor<T>::zeros({1}, true));
    }

    nn::Tensor<T> conv_block(const nn::Tensor<T>& x, const std::string& prefix) {
        const int h = x.shape()[1], w = x.shape()[2];
        nn::Tensor<T> y = nn::conv2d(x, store_.at(prefix + ".c1.w"));
        y = nn::relu(nn::add(y, nn::broadcast_spatial(store_.at(prefix + ".c1.b"), h, w)));
        y = nn::conv2d(y, store_.at(prefix + ".c2.w"));
        return nn::relu(nn::add(y, nn::broadcast_spatial(store_.at(prefix + ".c2.b"), h, w)));
    }

    nn::Tensor<T> conv1x1(const nn::Tensor<T>& x, const std::string& name) {
        const int h = x.shape()[1], w = x.shape()[2];
        nn::Tensor<T> y = nn::conv2d(x, store_.at(name + ".w"));
        return nn::add(y, nn::broadcast_spatial(store_.at(name + ".b"), h, w));
    }

    // Steerable conv + bias on frequency-0 channels + gated nonlinearity:
    // ReLU on frequency-0 channels, sigmoid-of-norm gating on the rest.
    nn::Tensor<T> steer_layer(const nn::Tensor<T>& x, const eq::SteerableBasis& basis,
                              const std::string& name, const eq::FieldType& out_ft) {
        nn::Tensor<T> y = eq::steerable_conv_forward(x, basis, store_.at(name + ".w"));
        const int h = y.shape()[1], w = y.shape()[2];
        nn::Tensor<T> bias = nn::mul(store_.at(name + ".b"), freq0_mask(out_ft));
        y = nn::add(y, nn::broadcast_spatial(bias, h, w));

        std::vector<nn::Tensor<T>> parts;
        int off = 0;
        for (const auto& ir : out_ft.irreps) {
            if (ir.dim() == 1 && ir.frequency == 0) {
                parts.push_back(nn::relu(nn::slice_channels(y, off, 1)));
            } else if (ir.dim() == 1) {
                // Sign irrep: gate by |f| to stay equivariant.
                nn::Tensor<T> f = nn::slice_channels(y, off, 1);
                nn::Tensor<T> gate =
                    nn::sigmoid(nn::sqrt(nn::add_const(nn::mul(f, f), T(1e-8))));
                parts.push_back(nn::mul(f, gate));
            } else {
                nn::Tensor<T> fx = nn::slice_channels(y, off, 1);
                nn::Tensor<T> fy = nn::slice_channels(y, off + 1, 1);
                nn::Tensor<T> norm = nn::sqrt(
                    nn::add_const(nn::add(nn::mul(fx, fx), nn::mul(fy, fy)), T(1e-8)));
                nn::Tensor<T> gate = nn::sigmoid(norm);
                parts.push_back(nn::concat_channels(nn::mul(fx, gate), nn::mul(fy, gate)));
            }
            off += ir.dim();
        }
        nn::Tensor<T> out = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) out = nn::concat_channels(out, parts[i]);
        return out;
    }

    const nn::Tensor<T>& freq0_mask(const eq::FieldType& ft) {
        auto it = freq0_masks_.find(&ft);
        if (it != freq0_masks_.end()) return it->second;
        std::vector<T> m(ft.total_dim(), T(0));
        int off = 0;
        for (const auto& ir : ft.irreps) {
            if (ir.dim() == 1 && ir.frequency == 0) m[off] = T(1);
            off += ir.dim();
        }
        return freq0_masks_.emplace(&ft, nn::Tensor<T>::from({ft.total_dim()}, std::move(m)))
            .first->second;
    }

    // log C_d(kappa) as a graph node; d log C / d kappa = -A_d(kappa).
    nn::Tensor<T> log_normalizer_graph(const nn::Tensor<T>& kappa) {
        const int d = cfg_.latent_dim();
        const double kv = std::clamp(static_cast<double>(kappa.value()[0]), vmf::kKappaMin,
                                     vmf::kKappaMax);
        const T value = static_cast<T>(vmf::log_normalizer(d, kv));
        const T slope = static_cast<T>(-vmf::mean_resultant_length(d, kv));
        return nn::detail::make_op<T>({1}, {value}, {kappa}, [slope](nn::Node<T>& self) {
            auto& pk = *self.parents[0];
            pk.ensure_grad();
            pk.grad[0] += self.grad[0] * slope;
        });
    }

    nn::Tensor<T> kl_bound_graph(const LatentResult<T>& q, const LatentResult<T>& p) {
        const int d = cfg_.latent_dim();
        const int d_work = (d % 2 == 1) ? d : d + 1;
        const double dstar = 0.5 * (d_work - 1);
        const double dd = dstar - 1.0;
        nn::Tensor<T> t = nn::dot(q.mu, p.mu);
        nn::Tensor<T> lk0 = nn::log(q.kappa);
        nn::Tensor<T> lk1 = nn::log(p.kappa);
        nn::Tensor<T> power_sum;
        for (int i = 0; i <= static_cast<int>(dd); ++i) {
            nn::Tensor<T> term = nn::exp(
                nn::add_const(nn::scale(lk0, static_cast<T>(i)),
                              static_cast<T>(-std::lgamma(i + 1.0))));
            power_sum = power_sum.defined() ? nn::add(power_sum, term) : term;
        }
        const double tail = (dd > 0.0) ? dstar * dd * std::log(dd) - dd * dd : 0.0;
        nn::Tensor<T> out = nn::sub(q.kappa, nn::mul(p.kappa, t));
        out = nn::add(out, nn::scale(nn::sub(lk0, lk1), static_cast<T>(dstar)));
        out = nn::add(out, power_sum);
        return nn::add_const(out, static_cast<T>(tail + 1.0));
    }

    ModelConfig cfg_;
    nn::ParameterStore<T> store_;
    eq::FieldType prior_in_, post_in_, hidden1_, hidden2_, head_ft_;
    eq::SteerableBasis prior_basis1_, post_basis1_, basis2_, head_basis_;
    int kappa_field_count_ = 8;
    nn::Tensor<T> helmert_t_, ones_k_, e1_, ref_shape_x_, ref_shape_y_;
    std::map<const eq::FieldType*, nn::Tensor<T>> freq0_masks_;
    bool warned_degenerate_ = false;
};

// ---- training -------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double loss = 0.0, reconstruction = 0.0, kl = 0.0, weight = 0.0;
    double seconds = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},          {"loss", loss},     {"reconstruction", reconstruction},
                {"kl", kl},                {"weight", weight}, {"seconds", seconds}};
    }
};

// Adam over all parameters, one image per step, one annotator mask sampled
// uniformly per image per step. Deterministic for a fixed seed.
template <typename T>
std::vector<EpochStats> train(KendallPUNet<T>& model,
                              const std::vector<data::SegSample>& samples) {
    if (samples.empty()) throw InvalidConfig("train: empty dataset");
    const ModelConfig& cfg = model.config();
    Rng rng(derive_seed(cfg.seed, 0x747261696eULL));  // "train"
    std::vector<EpochStats> log;
    std::vector<int> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // Fisher-Yates shuffle driven by the training stream.
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = rng.uniform_index(i);
            std::swap(order[i - 1], order[j]);
        }
        EpochStats stats;
        stats.epoch = epoch;
        for (int idx : order) {
            const auto& sample = samples[idx];
            const int g = static_cast<int>(rng.uniform_index(sample.masks.size()));
            model.params().zero_grad();
            LossResult<T> l = model.loss(sample, g, &rng);
            l.total.backward();
            nn::adam_step(model.params(), cfg.learning_rate);
            stats.loss += static_cast<double>(l.total.value()[0]);
            stats.reconstruction += l.reconstruction;
            stats.kl += l.kl;
            stats.weight += l.weight;
        }
        const double n = static_cast<double>(samples.size());
        stats.loss /= n;
        stats.reconstruction /= n;
        stats.kl /= n;
        stats.weight /= n;
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!std::isfinite(stats.loss))
            throw KspuError("train: non-finite loss at epoch " + std::to_string(epoch));
        log.push_back(stats);
    }
    return log;
}

// ---- evaluation -------------------------------------------------------------------

struct ImageMetrics {
    std::string id;
    double best_iou = 0.0, dice = 0.0, ged2 = 0.0, diversity = 0.0;

    nlohmann::json to_json() const {
        return {{"id", id},     {"best_iou", best_iou},     {"dice", dice},
                {"ged2", ged2}, {"diversity", diversity}};
    }
};

struct EvalReport {
    std::vector<ImageMetrics> per_image;
    ImageMetrics aggregate;  // id = "aggregate"
};

// Per image: best-match IoU (max over GT variants, mean over samples), Dice
// likewise, squared generalized energy distance with distance 1 - IoU, and
// sample diversity; plus the dataset means.
template <typename T>
EvalReport evaluate(KendallPUNet<T>& model, const std::vector<data::SegSample>& samples,
                    int n_samples, Rng& rng) {
    EvalReport report;
    report.aggregate.id = "aggregate";
    for (const auto& sample : samples) {
        const auto drawn = model.sample_segmentations(sample.image, n_samples, rng);
        ImageMetrics im;
        im.id = sample.id;
        for (const auto& mask : drawn) {
            double best_i = 0.0, best_d = 0.0;
            for (const auto& gt : sample.masks) {
                best_i = std::max(best_i, metrics::iou(mask, gt));
                best_d = std::max(best_d, metrics::dice(mask, gt));
            }
            im.best_iou += best_i;
            im.dice += best_d;
        }
        im.best_iou /= drawn.size();
        im.dice /= drawn.size();
        im.ged2 = metrics::ged2(drawn, sample.masks);
        im.diversity = metrics::diversity(drawn);
        report.aggregate.best_iou += im.best_iou;
        report.aggregate.dice += im.dice;
        report.aggregate.ged2 += im.ged2;
        report.aggregate.diversity += im.diversity;
        report.per_image.push_back(std::move(im));
    }
    const double n = static_cast<double>(std::max<size_t>(1, report.per_image.size()));
    report.aggregate.best_iou /= n;
    report.aggregate.dice /= n;
    report.aggregate.ged2 /= n;
    report.aggregate.diversity /= n;
    return report;
}

}  // namespace kspu::punet
