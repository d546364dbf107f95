#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "octpipe/image.hpp"
#include "octpipe/nn/checkpoint.hpp"
#include "octpipe/nn/graph.hpp"
#include "octpipe/nn/optim.hpp"
#include "octpipe/rng.hpp"

namespace oct {

namespace nn {

template <typename S>
Tensor<S> tensor_from_image(const BasicImage<float>& b) {
    Tensor<S> t({1, b.height, b.width});
    for (std::size_t i = 0; i < b.pixels.size(); ++i) t.data[i] = static_cast<S>(b.pixels[i]);
    return t;
}

template <typename S>
BasicImage<float> image_from_tensor(const Tensor<S>& t) {
    BasicImage<float> b(t.shape[t.shape.size() - 2], t.shape.back());
    for (std::size_t i = 0; i < b.pixels.size(); ++i) b.pixels[i] = static_cast<float>(t.data[i]);
    return b;
}

// Plain RMSE between two equally-shaped tensors; optionally accumulates the
// gradient with respect to `a` into g_a.
template <typename S>
double rmse(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>* g_a = nullptr) {
    if (a.shape != b.shape) throw shape_error("rmse operands must have identical dims");
    const std::size_t n = a.numel();
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        ss += d * d;
    }
    const double val = std::sqrt(ss / static_cast<double>(n));
    if (g_a) {
        if (g_a->shape != a.shape) {
            g_a->resize(a.shape);
        }
        if (val > 1e-12) {
            const double c = 1.0 / (val * static_cast<double>(n));
            for (std::size_t i = 0; i < n; ++i)
                g_a->data[i] += static_cast<S>(
                    c * (static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
        }
    }
    return val;
}

}  // namespace nn

template <typename S>
double rmse_loss(const BasicImage<S>& pred, const BasicImage<S>& target) {
    if (!pred.same_shape(target)) throw shape_error("rmse operands must have identical dims");
    double ss = 0;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
        const double d = static_cast<double>(pred.pixels[i]) - static_cast<double>(target.pixels[i]);
        ss += d * d;
    }
    return std::sqrt(ss / static_cast<double>(pred.pixels.size()));
}

// ---------------------------------------------------------------------------
// Perceptual feature extractor: a fixed 16-convolution pyramid in the VGG19
// arrangement (pools after convolutions 2, 4, 8, 12), tapped after
// convolutions 2, 4, 6, 10 and 14 (post-activation). Weights are either
// deterministically seeded or loaded from a checkpoint directory; they are
// never trained.
// ---------------------------------------------------------------------------
struct PerceptualExtractorSpec {
    int base_width = 8;  // channels of the first stage; VGG19 uses 64
    std::uint64_t seed = 7;
    std::string weights_dir;  // optional checkpoint with pretrained features
};

inline constexpr std::array<int, 5> kPerceptualTaps = {2, 4, 6, 10, 14};

template <typename S>
class PerceptualExtractor {
public:
    explicit PerceptualExtractor(const PerceptualExtractorSpec& spec = {}) : spec_(spec) {
        build();
        Rng rng(spec_.seed);
        Rng init = rng.derive("perceptual-init");
        graph_.init_params(init);
        if (!spec_.weights_dir.empty())
            nn::load_checkpoint_params(spec_.weights_dir, graph_.parameters());
        for (auto* p : graph_.parameters()) p->trainable = false;
        graph_.set_input_requires_grad(true);
    }

    // Feature maps at the five taps, strictly decreasing in resolution.
    std::vector<nn::Tensor<S>> features(const nn::Tensor<S>& image) {
        graph_.forward(image, false);
        std::vector<nn::Tensor<S>> out;
        out.reserve(tap_nodes_.size());
        for (const int n : tap_nodes_) out.push_back(graph_.node_output(n));
        return out;
    }

    // Mean over taps of the RMSE between pred and precomputed target features.
    // When g_pred is given, accumulates d(loss)/d(pred image) into it.
    double loss_against(const nn::Tensor<S>& pred,
                        const std::vector<nn::Tensor<S>>& target_feats,
                        nn::Tensor<S>* g_pred = nullptr) {
        graph_.forward(pred, false);
        const double k = static_cast<double>(tap_nodes_.size());
        double total = 0;
        std::vector<nn::Tensor<S>> seeds(tap_nodes_.size());
        for (std::size_t t = 0; t < tap_nodes_.size(); ++t) {
            const nn::Tensor<S>& f = graph_.node_output(tap_nodes_[t]);
            if (g_pred) {
                seeds[t].resize(f.shape);
                const double r = nn::rmse(f, target_feats[t], &seeds[t]);
                total += r;
                for (auto& v : seeds[t].data) v = static_cast<S>(v / k);
            } else {
                total += nn::rmse(f, target_feats[t]);
            }
        }
        if (g_pred) {
            std::vector<std::pair<int, const nn::Tensor<S>*>> seed_ptrs;
            for (std::size_t t = 0; t < tap_nodes_.size(); ++t)
                seed_ptrs.push_back({tap_nodes_[t], &seeds[t]});
            graph_.backward_multi(seed_ptrs);
            const nn::Tensor<S>& gi = graph_.input_grad();
            if (g_pred->shape != gi.shape) g_pred->resize(gi.shape);
            for (std::size_t i = 0; i < gi.numel(); ++i) g_pred->data[i] += gi.data[i];
        }
        return total / k;
    }

    const PerceptualExtractorSpec& spec() const { return spec_; }

private:
    void build() {
        // VGG19 channel plan scaled from 64 down to base_width.
        const int w = spec_.base_width;
        const std::array<int, 16> ch = {w,     w,     2 * w, 2 * w, 4 * w, 4 * w,
                                        4 * w, 4 * w, 8 * w, 8 * w, 8 * w, 8 * w,
                                        8 * w, 8 * w, 8 * w, 8 * w};
        int prev_ch = 1;
        int node = 0;
        int conv_idx = 0;
        for (int i = 0; i < 16; ++i) {
            ++conv_idx;
            node = graph_.add("vgg.conv" + std::to_string(conv_idx),
                              std::make_unique<nn::Conv<S>>("px.conv" + std::to_string(conv_idx),
                                                            prev_ch, ch[i], std::vector<int>{3, 3}),
                              {node});
            node = graph_.add("vgg.relu" + std::to_string(conv_idx),
                              std::make_unique<nn::Relu<S>>(), {node});
            prev_ch = ch[i];
            for (const int tap : kPerceptualTaps)
                if (tap == conv_idx) tap_nodes_.push_back(node);
            if (conv_idx == 2 || conv_idx == 4 || conv_idx == 8 || conv_idx == 12)
                node = graph_.add("vgg.pool" + std::to_string(conv_idx),
                                  std::make_unique<nn::MaxPool<S>>(), {node});
        }
    }

    PerceptualExtractorSpec spec_;
    nn::Graph<S> graph_;
    std::vector<int> tap_nodes_;
};

template <typename S>
double perceptual_loss(const BasicImage<float>& pred, const BasicImage<float>& target,
                       PerceptualExtractor<S>& ex) {
    const auto tf = ex.features(nn::tensor_from_image<S>(target));
    return ex.loss_against(nn::tensor_from_image<S>(pred), tf);
}

// ---------------------------------------------------------------------------
// The enhancer: a 3-level image-to-image U-Net with dilated feature blocks,
// a residual bottleneck, multi-scale heads summed into the decoder output and
// a sigmoid head. Accepts any H x W divisible by 4.
// ---------------------------------------------------------------------------
struct EnhancerSpec {
    int base_filters = 22;  // tuned so width_scale = 1 lands near 900 K params
    double width_scale = 1.0;
    std::uint64_t seed = 1;

    int filters() const { return nn::scale_ch(base_filters, width_scale); }

    nlohmann::json to_json() const {
        return {{"kind", "enhancer"},
                {"base_filters", base_filters},
                {"width_scale", width_scale},
                {"seed", seed}};
    }
    static EnhancerSpec from_json(const nlohmann::json& j) {
        EnhancerSpec s;
        if (j.value("kind", "") != "enhancer") throw format_error("checkpoint is not an enhancer");
        s.base_filters = j.at("base_filters").get<int>();
        s.width_scale = j.at("width_scale").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
        return s;
    }
};

struct EnhancerLossWeights {
    double rmse_weight = 1.0;
    double perceptual_weight = 0.01;
};

namespace detail {

// Two 3x3 convolutions per dilation rate (1, 2, 4), branches summed,
// batch-normalised and elu-activated.
template <typename S>
int add_dilated_block(nn::Graph<S>& g, int in, int in_ch, int out_ch, const std::string& name) {
    std::vector<int> branches;
    for (const int rate : {1, 2, 4}) {
        const std::string bn = name + ".d" + std::to_string(rate);
        int n = g.add(bn + ".conv0",
                      std::make_unique<nn::Conv<S>>(bn + ".conv0", in_ch, out_ch,
                                                    std::vector<int>{3, 3},
                                                    std::vector<int>{rate, rate}),
                      {in});
        n = g.add(bn + ".elu", std::make_unique<nn::Elu<S>>(), {n});
        n = g.add(bn + ".conv1",
                  std::make_unique<nn::Conv<S>>(bn + ".conv1", out_ch, out_ch,
                                                std::vector<int>{3, 3},
                                                std::vector<int>{rate, rate}),
                  {n});
        branches.push_back(n);
    }
    int n = g.add(name + ".sum", std::make_unique<nn::Add<S>>(), branches);
    n = g.add(name + ".bn", std::make_unique<nn::BatchNorm<S>>(name + ".bn", out_ch), {n});
    return g.add(name + ".elu", std::make_unique<nn::Elu<S>>(), {n});
}

template <typename S>
int add_residual_block_2d(nn::Graph<S>& g, int in, int ch, const std::string& name) {
    int n = g.add(name + ".conv0",
                  std::make_unique<nn::Conv<S>>(name + ".conv0", ch, ch, std::vector<int>{3, 3}),
                  {in});
    n = g.add(name + ".bn0", std::make_unique<nn::BatchNorm<S>>(name + ".bn0", ch), {n});
    n = g.add(name + ".elu0", std::make_unique<nn::Elu<S>>(), {n});
    n = g.add(name + ".conv1",
              std::make_unique<nn::Conv<S>>(name + ".conv1", ch, ch, std::vector<int>{3, 3}),
              {n});
    n = g.add(name + ".bn1", std::make_unique<nn::BatchNorm<S>>(name + ".bn1", ch), {n});
    n = g.add(name + ".add", std::make_unique<nn::Add<S>>(), {n, in});
    return g.add(name + ".elu1", std::make_unique<nn::Elu<S>>(), {n});
}

}  // namespace detail

// Builds the enhancer into `g` starting from its input node; returns the
// sigmoid output node.
template <typename S>
int build_enhancer_into(nn::Graph<S>& g, const EnhancerSpec& spec, const std::string& px = "") {
    const int F = spec.filters();
    using namespace detail;

    const int enc0 = add_dilated_block(g, 0, 1, F, px + "enc0");
    const int p0 = g.add(px + "pool0", std::make_unique<nn::MaxPool<S>>(), {enc0});
    const int enc1 = add_dilated_block(g, p0, F, 2 * F, px + "enc1");
    const int p1 = g.add(px + "pool1", std::make_unique<nn::MaxPool<S>>(), {enc1});

    int lat = g.add(px + "lat.in",
                    std::make_unique<nn::Conv<S>>(px + "lat.in", 2 * F, 4 * F,
                                                  std::vector<int>{3, 3}),
                    {p1});
    lat = g.add(px + "lat.bn", std::make_unique<nn::BatchNorm<S>>(px + "lat.bn", 4 * F), {lat});
    lat = g.add(px + "lat.elu", std::make_unique<nn::Elu<S>>(), {lat});
    for (int i = 0; i < 4; ++i)
        lat = add_residual_block_2d(g, lat, 4 * F, px + "lat.res" + std::to_string(i));

    int up1 = g.add(px + "up1",
                    std::make_unique<nn::TransposedConv<S>>(px + "up1", 4 * F, 2 * F,
                                                            std::vector<int>{3, 3}),
                    {lat});
    int cat1 = g.add(px + "cat1", std::make_unique<nn::ConcatChannels<S>>(), {up1, enc1});
    const int dec1 = add_dilated_block(g, cat1, 4 * F, 2 * F, px + "dec1");

    int up0 = g.add(px + "up0",
                    std::make_unique<nn::TransposedConv<S>>(px + "up0", 2 * F, F,
                                                            std::vector<int>{3, 3}),
                    {dec1});
    int cat0 = g.add(px + "cat0", std::make_unique<nn::ConcatChannels<S>>(), {up0, enc0});
    const int dec0 = add_dilated_block(g, cat0, 2 * F, F, px + "dec0");

    int ms_lat = g.add(px + "ms.lat.proj",
                       std::make_unique<nn::Conv<S>>(px + "ms.lat.proj", 4 * F, F,
                                                     std::vector<int>{1, 1}),
                       {lat});
    ms_lat = g.add(px + "ms.lat.up", std::make_unique<nn::UpsampleLinear<S>>(4), {ms_lat});
    int ms_dec1 = g.add(px + "ms.dec1.proj",
                        std::make_unique<nn::Conv<S>>(px + "ms.dec1.proj", 2 * F, F,
                                                      std::vector<int>{1, 1}),
                        {dec1});
    ms_dec1 = g.add(px + "ms.dec1.up", std::make_unique<nn::UpsampleLinear<S>>(2), {ms_dec1});

    const int head_in = g.add(px + "head.sum", std::make_unique<nn::Add<S>>(),
                              {dec0, ms_dec1, ms_lat});
    const int logits = g.add(px + "head.conv",
                             std::make_unique<nn::Conv<S>>(px + "head.conv", F, 1,
                                                           std::vector<int>{3, 3}),
                             {head_in});
    return g.add(px + "head.sigmoid", std::make_unique<nn::Sigmoid<S>>(), {logits});
}

// A built enhancer plus everything needed to run and persist it.
template <typename S>
class EnhancerNet {
public:
    explicit EnhancerNet(const EnhancerSpec& spec) : spec_(spec) {
        out_node_ = build_enhancer_into(graph_, spec_);
        Rng rng(spec_.seed);
        Rng init = rng.derive("enhancer-init");
        graph_.init_params(init);
    }

    static EnhancerNet load(const std::string& dir) {
        EnhancerNet net(EnhancerSpec::from_json(nn::load_checkpoint_spec(dir)));
        nn::load_checkpoint_params(dir, net.graph_.parameters());
        return net;
    }

    void save(const std::string& dir) {
        nn::save_checkpoint(dir, spec_.to_json(), graph_.parameters());
    }

    const nn::Tensor<S>& forward(const nn::Tensor<S>& image, bool training = false) {
        if (image.shape.size() != 3 || image.shape[0] != 1)
            throw shape_error("enhancer expects a {1,H,W} tensor");
        if (image.shape[1] % 4 != 0 || image.shape[2] % 4 != 0)
            throw shape_error("enhancer input dims must be divisible by 4");
        return graph_.forward(image, training);
    }

    BasicImage<float> enhance(const BasicImage<float>& b) {
        return nn::image_from_tensor(forward(nn::tensor_from_image<S>(b), false));
    }

    nn::Graph<S>& graph() { return graph_; }
    const EnhancerSpec& spec() const { return spec_; }
    std::int64_t parameter_count(bool trainable_only = false) {
        return graph_.parameter_count(trainable_only);
    }

private:
    EnhancerSpec spec_;
    nn::Graph<S> graph_;
    int out_node_ = 0;
};

inline OctVolume enhance_volume_with_net(EnhancerNet<float>& net, const OctVolume& v) {
    OctVolume out = v;
    for (int d = 0; d < v.depth; ++d) insert_bscan(out, net.enhance(extract_bscan(v, d)), d);
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
struct EnhancerTrainConfig {
    int epochs = 50;
    long max_steps = 0;  // 0 = run all epochs
    double lr = 1e-4;    // Adam
    EnhancerLossWeights loss;
    PerceptualExtractorSpec extractor;
    std::uint64_t seed = 1;
    std::ostream* log = nullptr;
    // Optional early stop: finish once the epoch-mean combined loss is below
    // this (0 disables).
    double stop_at_loss = 0.0;
};

struct EnhancerTrainResult {
    std::vector<double> epoch_loss;
    long steps = 0;
};

// Minimises rmse_weight * RMSE + perceptual_weight * perceptual over the
// given (baseline, digitally enhanced) pairs, batch size 1, Adam.
template <typename S>
EnhancerTrainResult train_enhancer(EnhancerNet<S>& net,
                                   const std::vector<std::pair<BScan, BScan>>& pairs,
                                   const EnhancerTrainConfig& cfg) {
    if (pairs.empty()) throw data_error("enhancer training needs a non-empty dataset");
    for (const auto& [x, y] : pairs)
        if (!x.same_shape(y)) throw shape_error("training pair dims differ");

    PerceptualExtractor<S> extractor(cfg.extractor);
    Rng rng(cfg.seed);
    Rng order_rng = rng.derive("enhancer-data-order");
    nn::Adam<S> opt(cfg.lr);
    auto params = net.graph().parameters();

    // Inputs and targets as tensors; target features cached once.
    std::vector<nn::Tensor<S>> inputs, targets;
    std::vector<std::vector<nn::Tensor<S>>> target_feats;
    for (const auto& [x, y] : pairs) {
        inputs.push_back(nn::tensor_from_image<S>(x));
        targets.push_back(nn::tensor_from_image<S>(y));
        target_feats.push_back(extractor.features(targets.back()));
    }

    EnhancerTrainResult result;
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    nn::Tensor<S> g_out;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0;
        for (const std::size_t idx : order) {
            const nn::Tensor<S>& pred = net.forward(inputs[idx], true);
            g_out.resize(pred.shape);
            g_out.fill(S(0));

            nn::Tensor<S> g_rmse;
            g_rmse.resize(pred.shape);
            const double l_rmse = nn::rmse(pred, targets[idx], &g_rmse);
            double l_perc = 0;
            if (cfg.loss.perceptual_weight > 0) {
                nn::Tensor<S> g_perc;
                g_perc.resize(pred.shape);
                l_perc = extractor.loss_against(pred, target_feats[idx], &g_perc);
                for (std::size_t i = 0; i < g_out.numel(); ++i)
                    g_out.data[i] = static_cast<S>(cfg.loss.rmse_weight * g_rmse.data[i] +
                                                   cfg.loss.perceptual_weight * g_perc.data[i]);
            } else {
                for (std::size_t i = 0; i < g_out.numel(); ++i)
                    g_out.data[i] = static_cast<S>(cfg.loss.rmse_weight * g_rmse.data[i]);
            }
            const double loss =
                cfg.loss.rmse_weight * l_rmse + cfg.loss.perceptual_weight * l_perc;
            if (!std::isfinite(loss))
                throw data_error("non-finite enhancer loss at step " +
                                 std::to_string(result.steps));

            net.graph().zero_param_grads();
            net.graph().backward(g_out);
            opt.step(params);
            epoch_loss += loss;
            ++result.steps;
            if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
                result.epoch_loss.push_back(epoch_loss / static_cast<double>(pairs.size()));
                return result;
            }
        }
        epoch_loss /= static_cast<double>(pairs.size());
        result.epoch_loss.push_back(epoch_loss);
        if (cfg.log)
            (*cfg.log) << "epoch " << epoch << " loss " << epoch_loss << "\n";
        if (cfg.stop_at_loss > 0 && epoch_loss < cfg.stop_at_loss) break;
    }
    return result;
}

}  // namespace oct
