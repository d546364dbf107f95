#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "octpipe/nn/checkpoint.hpp"
#include "octpipe/nn/graph.hpp"
#include "octpipe/nn/optim.hpp"
#include "octpipe/segeval.hpp"
#include "octpipe/volume.hpp"

namespace oct {

enum class FeUnitType : int { Type1 = 1, Type2 = 2, Type3 = 3 };

inline FeUnitType fe_type_from_int(int t) {
    if (t < 1 || t > 3) throw data_error("FE unit type must be 1, 2 or 3");
    return static_cast<FeUnitType>(t);
}

// ---------------------------------------------------------------------------
// Per-voxel class probabilities, channels-first {8, D, H, W}.
// ---------------------------------------------------------------------------
struct ProbVolume {
    int height = 0, width = 0, depth = 0;
    nn::Tensor<float> probs;

    float prob(int h, int w, int d, int c) const {
        const std::size_t plane = static_cast<std::size_t>(depth) * height * width;
        return probs.data[c * plane + (static_cast<std::size_t>(d) * height + h) * width + w];
    }
};

inline ProbVolume prob_volume_from_tensor(const nn::Tensor<float>& t) {
    if (t.shape.size() != 4 || t.shape[0] != kNumClasses)
        throw shape_error("probability tensor must be {8,D,H,W}");
    ProbVolume p;
    p.depth = t.shape[1];
    p.height = t.shape[2];
    p.width = t.shape[3];
    p.probs = t;
    return p;
}

// Argmax over the 8 class probabilities; ties break to the lowest class id.
inline LabelVolume argmax_labels(const ProbVolume& p, const VoxelSpacing& spacing = {}) {
    LabelVolume l(p.height, p.width, p.depth, spacing);
    const std::size_t plane = static_cast<std::size_t>(p.depth) * p.height * p.width;
    for (std::size_t v = 0; v < plane; ++v) {
        int best = 0;
        float bv = p.probs.data[v];
        for (int c = 1; c < kNumClasses; ++c) {
            const float pv = p.probs.data[c * plane + v];
            if (pv > bv) {
                bv = pv;
                best = c;
            }
        }
        l.labels[v] = static_cast<std::uint8_t>(best);
    }
    return l;
}

// ---------------------------------------------------------------------------
// Soft Jaccard distance, averaged over the classes present in the ground
// truth, with epsilon smoothing on the denominator. Optionally accumulates
// the gradient with respect to the probabilities.
// ---------------------------------------------------------------------------
template <typename S>
double soft_jaccard_loss(const nn::Tensor<S>& probs, const LabelVolume& truth,
                         nn::Tensor<S>* grad = nullptr, double eps = 1e-7) {
    if (probs.shape.size() != 4 || probs.shape[0] != kNumClasses)
        throw shape_error("probability tensor must be {8,D,H,W}");
    const std::size_t plane = probs.spatial_size();
    if (plane != truth.labels.size() || probs.shape[1] != truth.depth ||
        probs.shape[2] != truth.height || probs.shape[3] != truth.width)
        throw shape_error("probability/label dims differ");
    if (grad && grad->shape != probs.shape) grad->resize(probs.shape);

    std::array<double, kNumClasses> inter{}, psum{}, gsum{};
    for (int c = 0; c < kNumClasses; ++c) {
        const S* pc = probs.data.data() + c * plane;
        double i = 0, p = 0, g = 0;
        for (std::size_t v = 0; v < plane; ++v) {
            p += pc[v];
            if (truth.labels[v] == c) {
                i += pc[v];
                g += 1.0;
            }
        }
        inter[c] = i;
        psum[c] = p;
        gsum[c] = g;
    }

    int present = 0;
    double loss = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        if (gsum[c] == 0) continue;
        ++present;
        const double u = psum[c] + gsum[c] - inter[c];
        loss += 1.0 - inter[c] / (u + eps);
    }
    if (present == 0) throw data_error("ground truth contains no voxels");
    loss /= present;

    if (grad) {
        for (int c = 0; c < kNumClasses; ++c) {
            if (gsum[c] == 0) continue;
            const double u = psum[c] + gsum[c] - inter[c] + eps;
            const double uu = u * u;
            S* gc = grad->data.data() + c * plane;
            const double i = inter[c];
            for (std::size_t v = 0; v < plane; ++v) {
                const double y = truth.labels[v] == c ? 1.0 : 0.0;
                // d/dp [1 - I/U] with dI = y, dU = 1 - y
                gc[v] += static_cast<S>(-(y * u - i * (1.0 - y)) / uu / present);
            }
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// FE units. All three take in_ch channels and emit fe_out_channels(t, C):
// C for Types 1-2, 3C for Type 3 (its residual widths are C, 2C, 3C).
// ---------------------------------------------------------------------------
inline int fe_out_channels(FeUnitType t, int c) {
    return t == FeUnitType::Type3 ? 3 * c : c;
}

namespace detail {

template <typename S>
int add_fe_unit(nn::Graph<S>& g, int in, FeUnitType type, int in_ch, int c,
                const std::string& name) {
    using nn::Conv;
    if (type == FeUnitType::Type2 || type == FeUnitType::Type3) {
        in = g.add(name + ".pre_elu", std::make_unique<nn::Elu<S>>(), {in});
    }
    if (type == FeUnitType::Type1 || type == FeUnitType::Type2) {
        // identity / planar / volumetric pathways, summed.
        const int idn = g.add(name + ".idn",
                              std::make_unique<Conv<S>>(name + ".idn", in_ch, c,
                                                        std::vector<int>{1, 1, 1}),
                              {in});
        // planar: height-width, height-depth, width-depth extents
        int pl = g.add(name + ".pl_hw",
                       std::make_unique<Conv<S>>(name + ".pl_hw", in_ch, c,
                                                 std::vector<int>{1, 3, 3}),
                       {in});
        pl = g.add(name + ".pl_hd",
                   std::make_unique<Conv<S>>(name + ".pl_hd", c, c, std::vector<int>{3, 3, 1}),
                   {pl});
        pl = g.add(name + ".pl_wd",
                   std::make_unique<Conv<S>>(name + ".pl_wd", c, c, std::vector<int>{3, 1, 3}),
                   {pl});
        int vol = g.add(name + ".vol0",
                        std::make_unique<Conv<S>>(name + ".vol0", in_ch, c,
                                                  std::vector<int>{3, 3, 3}),
                        {in});
        vol = g.add(name + ".vol1",
                    std::make_unique<Conv<S>>(name + ".vol1", c, c, std::vector<int>{3, 3, 3}),
                    {vol});
        vol = g.add(name + ".vol2",
                    std::make_unique<Conv<S>>(name + ".vol2", c, c, std::vector<int>{3, 3, 3}),
                    {vol});
        int n = g.add(name + ".sum", std::make_unique<nn::Add<S>>(), {idn, pl, vol});
        n = g.add(name + ".bn", std::make_unique<nn::BatchNorm<S>>(name + ".bn", c), {n});
        return g.add(name + ".elu", std::make_unique<nn::Elu<S>>(), {n});
    }
    // Type 3: three residual blocks of widths C, 2C, 3C; each one 3x3x3
    // convolution plus a 1x1x1 identity convolution, summed, elu.
    int n = in;
    int prev = in_ch;
    for (int b = 0; b < 3; ++b) {
        const int width = c * (b + 1);
        const std::string bn = name + ".res" + std::to_string(b);
        const int conv = g.add(bn + ".conv",
                               std::make_unique<Conv<S>>(bn + ".conv", prev, width,
                                                         std::vector<int>{3, 3, 3}),
                               {n});
        const int idn = g.add(bn + ".idn",
                              std::make_unique<Conv<S>>(bn + ".idn", prev, width,
                                                        std::vector<int>{1, 1, 1}),
                              {n});
        n = g.add(bn + ".sum", std::make_unique<nn::Add<S>>(), {conv, idn});
        n = g.add(bn + ".elu", std::make_unique<nn::Elu<S>>(), {n});
        prev = width;
    }
    n = g.add(name + ".bn", std::make_unique<nn::BatchNorm<S>>(name + ".bn", prev), {n});
    return g.add(name + ".elu", std::make_unique<nn::Elu<S>>(), {n});
}

// Micro U-Net: FE unit, pool, FE unit, up-convolution, skip concat, FE unit.
// Preserves spatial resolution; emits fe_out_channels(type, c) channels.
template <typename S>
int add_mu_unet(nn::Graph<S>& g, int in, FeUnitType type, int in_ch, int c,
                const std::string& name) {
    const int fe_out = fe_out_channels(type, c);
    const int a = add_fe_unit(g, in, type, in_ch, c, name + ".fe_in");
    const int p = g.add(name + ".pool", std::make_unique<nn::MaxPool<S>>(), {a});
    const int b = add_fe_unit(g, p, type, fe_out, c, name + ".fe_bottom");
    const int u = g.add(name + ".up",
                        std::make_unique<nn::TransposedConv<S>>(name + ".up", fe_out, c,
                                                                std::vector<int>{3, 3, 3}),
                        {b});
    const int cat = g.add(name + ".cat", std::make_unique<nn::ConcatChannels<S>>(), {u, a});
    return add_fe_unit(g, cat, type, c + fe_out, c, name + ".fe_out");
}

template <typename S>
int add_latent_space(nn::Graph<S>& g, int in, int in_ch, int ch, const std::string& name) {
    int n = g.add(name + ".in",
                  std::make_unique<nn::Conv<S>>(name + ".in", in_ch, ch,
                                                std::vector<int>{3, 3, 3}),
                  {in});
    n = g.add(name + ".bn", std::make_unique<nn::BatchNorm<S>>(name + ".bn", ch), {n});
    n = g.add(name + ".elu", std::make_unique<nn::Elu<S>>(), {n});
    for (int b = 0; b < 4; ++b) {
        const std::string bn = name + ".res" + std::to_string(b);
        int m = g.add(bn + ".conv0",
                      std::make_unique<nn::Conv<S>>(bn + ".conv0", ch, ch,
                                                    std::vector<int>{3, 3, 3}),
                      {n});
        m = g.add(bn + ".bn0", std::make_unique<nn::BatchNorm<S>>(bn + ".bn0", ch), {m});
        m = g.add(bn + ".elu0", std::make_unique<nn::Elu<S>>(), {m});
        m = g.add(bn + ".conv1",
                  std::make_unique<nn::Conv<S>>(bn + ".conv1", ch, ch,
                                                std::vector<int>{3, 3, 3}),
                  {m});
        m = g.add(bn + ".bn1", std::make_unique<nn::BatchNorm<S>>(bn + ".bn1", ch), {m});
        m = g.add(bn + ".add", std::make_unique<nn::Add<S>>(), {m, n});
        n = g.add(bn + ".elu1", std::make_unique<nn::Elu<S>>(), {m});
    }
    return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Segmentation CNN: macro U-shape of four micro-U-Nets around a residual
// latent space, with encoder->decoder skips, multi-scale projections summed
// into the decoder output, then a 1x1x1 convolution to 8 classes + softmax.
// ---------------------------------------------------------------------------
struct SegCnnSpec {
    FeUnitType fe_type = FeUnitType::Type1;
    int base_filters = 48;
    double width_scale = 1.0;
    std::uint64_t seed = 1;

    int filters() const { return nn::scale_ch(base_filters, width_scale); }
    int latent_filters() const { return nn::scale_ch(2 * base_filters, width_scale); }

    nlohmann::json to_json() const {
        return {{"kind", "segcnn"},
                {"fe_type", static_cast<int>(fe_type)},
                {"base_filters", base_filters},
                {"width_scale", width_scale},
                {"seed", seed}};
    }
    static SegCnnSpec from_json(const nlohmann::json& j) {
        SegCnnSpec s;
        if (j.value("kind", "") != "segcnn") throw format_error("checkpoint is not a seg CNN");
        s.fe_type = fe_type_from_int(j.at("fe_type").get<int>());
        s.base_filters = j.at("base_filters").get<int>();
        s.width_scale = j.at("width_scale").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
        return s;
    }
};

struct SegCnnNodes {
    int logits = 0;  // pre-softmax 8-channel maps (fed to the ensembler)
    int probs = 0;
};

template <typename S>
SegCnnNodes build_seg_cnn_into(nn::Graph<S>& g, const SegCnnSpec& spec,
                               const std::string& px = "") {
    using namespace detail;
    const FeUnitType t = spec.fe_type;
    const int C = spec.filters();
    const int L = spec.latent_filters();
    const int fe_out = fe_out_channels(t, C);

    const int m1 = add_mu_unet(g, 0, t, 1, C, px + "mu1");
    const int p1 = g.add(px + "pool1", std::make_unique<nn::MaxPool<S>>(), {m1});
    const int m2 = add_mu_unet(g, p1, t, fe_out, C, px + "mu2");
    const int p2 = g.add(px + "pool2", std::make_unique<nn::MaxPool<S>>(), {m2});

    const int lat = add_latent_space(g, p2, fe_out, L, px + "latent");

    const int u2 = g.add(px + "up2",
                         std::make_unique<nn::TransposedConv<S>>(px + "up2", L, C,
                                                                 std::vector<int>{3, 3, 3}),
                         {lat});
    const int cat2 = g.add(px + "cat2", std::make_unique<nn::ConcatChannels<S>>(), {u2, m2});
    const int m3 = add_mu_unet(g, cat2, t, C + fe_out, C, px + "mu3");

    const int u1 = g.add(px + "up1",
                         std::make_unique<nn::TransposedConv<S>>(px + "up1", fe_out, C,
                                                                 std::vector<int>{3, 3, 3}),
                         {m3});
    const int cat1 = g.add(px + "cat1", std::make_unique<nn::ConcatChannels<S>>(), {u1, m1});
    const int m4 = add_mu_unet(g, cat1, t, C + fe_out, C, px + "mu4");

    // Multi-scale hierarchical maps projected to the decoder width and summed
    // into its output before the class head.
    int ms_lat = g.add(px + "ms.lat.proj",
                       std::make_unique<nn::Conv<S>>(px + "ms.lat.proj", L, fe_out,
                                                     std::vector<int>{1, 1, 1}),
                       {lat});
    ms_lat = g.add(px + "ms.lat.up", std::make_unique<nn::UpsampleLinear<S>>(4), {ms_lat});
    int ms_m3 = g.add(px + "ms.m3.proj",
                      std::make_unique<nn::Conv<S>>(px + "ms.m3.proj", fe_out, fe_out,
                                                    std::vector<int>{1, 1, 1}),
                      {m3});
    ms_m3 = g.add(px + "ms.m3.up", std::make_unique<nn::UpsampleLinear<S>>(2), {ms_m3});

    const int prefinal = g.add(px + "prefinal", std::make_unique<nn::Add<S>>(),
                               {m4, ms_m3, ms_lat});
    SegCnnNodes nodes;
    nodes.logits = g.add(px + "head",
                         std::make_unique<nn::Conv<S>>(px + "head", fe_out, kNumClasses,
                                                       std::vector<int>{1, 1, 1}),
                         {prefinal});
    nodes.probs = g.add(px + "softmax", std::make_unique<nn::SoftmaxChannels<S>>(),
                        {nodes.logits});
    return nodes;
}

template <typename S>
nn::Tensor<S> tensor_from_volume(const OctVolume& v) {
    nn::Tensor<S> t({1, v.depth, v.height, v.width});
    for (std::size_t i = 0; i < v.voxels.size(); ++i) t.data[i] = static_cast<S>(v.voxels[i]);
    return t;
}

inline void check_seg_dims(const OctVolume& v) {
    if (v.height % 4 != 0 || v.width % 4 != 0 || v.depth % 4 != 0)
        throw shape_error("segmentation input dims must be divisible by 4");
}

template <typename S>
class SegCnn {
public:
    explicit SegCnn(const SegCnnSpec& spec) : spec_(spec) {
        nodes_ = build_seg_cnn_into(graph_, spec_);
        Rng rng(spec_.seed);
        Rng init = rng.derive("segcnn-init", static_cast<std::uint64_t>(spec_.fe_type));
        graph_.init_params(init);
    }

    static SegCnn load(const std::string& dir) {
        SegCnn net(SegCnnSpec::from_json(nn::load_checkpoint_spec(dir)));
        nn::load_checkpoint_params(dir, net.graph_.parameters());
        return net;
    }

    void save(const std::string& dir) {
        nn::save_checkpoint(dir, spec_.to_json(), graph_.parameters());
    }

    const nn::Tensor<S>& forward(const nn::Tensor<S>& volume, bool training = false) {
        graph_.forward(volume, training);
        return graph_.node_output(nodes_.probs);
    }

    std::pair<ProbVolume, LabelVolume> segment(const OctVolume& v) {
        check_seg_dims(v);
        const nn::Tensor<S>& probs = forward(tensor_from_volume<S>(v), false);
        ProbVolume pv = prob_volume_from_tensor(probs.template cast<float>());
        return {pv, argmax_labels(pv, v.spacing)};
    }

    nn::Graph<S>& graph() { return graph_; }
    const SegCnnSpec& spec() const { return spec_; }
    const SegCnnNodes& nodes() const { return nodes_; }
    std::int64_t parameter_count(bool trainable_only = false) {
        return graph_.parameter_count(trainable_only);
    }

private:
    SegCnnSpec spec_;
    nn::Graph<S> graph_;
    SegCnnNodes nodes_;
};

// ---------------------------------------------------------------------------
// Ensembler: three pairs of 3x3x3 convolution sets (48, 96, 192 filters)
// separated by 0.50 dropout, then per-voxel dense layers 64 -> 8 (1x1x1
// convolutions) with dropout between them, softmax output.
// ---------------------------------------------------------------------------
struct EnsemblerSpec {
    std::array<int, 3> conv_filters = {48, 96, 192};
    int dense_units = 64;
    double dropout = 0.50;
    double width_scale = 1.0;

    nlohmann::json to_json() const {
        return {{"conv_filters", conv_filters},
                {"dense_units", dense_units},
                {"dropout", dropout},
                {"width_scale", width_scale}};
    }
    static EnsemblerSpec from_json(const nlohmann::json& j) {
        EnsemblerSpec s;
        s.conv_filters = j.at("conv_filters").get<std::array<int, 3>>();
        s.dense_units = j.at("dense_units").get<int>();
        s.dropout = j.at("dropout").get<double>();
        s.width_scale = j.at("width_scale").get<double>();
        return s;
    }
};

template <typename S>
int build_ensembler_into(nn::Graph<S>& g, int in, int in_ch, const EnsemblerSpec& spec,
                         const std::string& px) {
    using nn::Conv;
    int n = in;
    int prev = in_ch;
    for (int s = 0; s < 3; ++s) {
        const int ch = nn::scale_ch(spec.conv_filters[s], spec.width_scale);
        const std::string name = px + "set" + std::to_string(s);
        n = g.add(name + ".conv0",
                  std::make_unique<Conv<S>>(name + ".conv0", prev, ch,
                                            std::vector<int>{3, 3, 3}),
                  {n});
        n = g.add(name + ".elu0", std::make_unique<nn::Elu<S>>(), {n});
        n = g.add(name + ".conv1",
                  std::make_unique<Conv<S>>(name + ".conv1", ch, ch, std::vector<int>{3, 3, 3}),
                  {n});
        n = g.add(name + ".elu1", std::make_unique<nn::Elu<S>>(), {n});
        if (s < 2)
            n = g.add(name + ".dropout", std::make_unique<nn::Dropout<S>>(spec.dropout), {n});
        prev = ch;
    }
    const int dense = nn::scale_ch(spec.dense_units, spec.width_scale);
    n = g.add(px + "dense0",
              std::make_unique<Conv<S>>(px + "dense0", prev, dense, std::vector<int>{1, 1, 1}),
              {n});
    n = g.add(px + "dense0.elu", std::make_unique<nn::Elu<S>>(), {n});
    n = g.add(px + "dense.dropout", std::make_unique<nn::Dropout<S>>(spec.dropout), {n});
    n = g.add(px + "dense1",
              std::make_unique<Conv<S>>(px + "dense1", dense, kNumClasses,
                                        std::vector<int>{1, 1, 1}),
              {n});
    return g.add(px + "softmax", std::make_unique<nn::SoftmaxChannels<S>>(), {n});
}

// ---------------------------------------------------------------------------
// ONH-Net: the three trained CNNs as frozen parallel pipelines; their
// pre-softmax 8-channel maps concatenated (24 channels) into the trainable
// ensembler.
// ---------------------------------------------------------------------------
template <typename S>
class OnhNet {
public:
    // Builds the assembled network and copies the parameters of the three
    // trained CNNs. The CNN subgraphs are frozen; only the ensembler trains.
    OnhNet(SegCnn<S>& cnn1, SegCnn<S>& cnn2, SegCnn<S>& cnn3, const EnsemblerSpec& ens,
           std::uint64_t ens_seed = 1)
        : OnhNet(std::array<const SegCnnSpec*, 3>{&cnn1.spec(), &cnn2.spec(), &cnn3.spec()},
                 ens, ens_seed) {
        std::array<SegCnn<S>*, 3> cnns = {&cnn1, &cnn2, &cnn3};
        for (int k = 0; k < 3; ++k) {
            auto src = cnns[k]->graph().parameters();
            copy_cnn_params(k, src);
        }
    }

    static OnhNet load(const std::string& dir) {
        const nlohmann::json spec = nn::load_checkpoint_spec(dir);
        if (spec.value("kind", "") != "onhnet") throw format_error("checkpoint is not an ONH-Net");
        std::array<SegCnnSpec, 3> cnn_specs;
        for (int k = 0; k < 3; ++k)
            cnn_specs[k] = SegCnnSpec::from_json(spec.at("cnns").at(k));
        OnhNet net(
            std::array<const SegCnnSpec*, 3>{&cnn_specs[0], &cnn_specs[1], &cnn_specs[2]},
            EnsemblerSpec::from_json(spec.at("ensembler")),
            spec.value("ensembler_seed", std::uint64_t{1}));
        nn::load_checkpoint_params(dir, net.graph_.parameters());
        return net;
    }

    void save(const std::string& dir) {
        nlohmann::json spec = {{"kind", "onhnet"},
                               {"ensembler", ens_spec_.to_json()},
                               {"ensembler_seed", ens_seed_},
                               {"cnns", nlohmann::json::array()}};
        for (const auto& s : cnn_specs_) spec["cnns"].push_back(s.to_json());
        nn::save_checkpoint(dir, spec, graph_.parameters());
    }

    const nn::Tensor<S>& forward(const nn::Tensor<S>& volume, bool training = false) {
        graph_.forward(volume, training);
        return graph_.node_output(out_node_);
    }

    std::pair<ProbVolume, LabelVolume> segment(const OctVolume& v) {
        check_seg_dims(v);
        const nn::Tensor<S>& probs = forward(tensor_from_volume<S>(v), false);
        ProbVolume pv = prob_volume_from_tensor(probs.template cast<float>());
        return {pv, argmax_labels(pv, v.spacing)};
    }

    nn::Graph<S>& graph() { return graph_; }
    const EnsemblerSpec& ensembler_spec() const { return ens_spec_; }
    const std::array<SegCnnSpec, 3>& cnn_specs() const { return cnn_specs_; }

    std::int64_t parameter_count(bool trainable_only = false) {
        return graph_.parameter_count(trainable_only);
    }
    std::int64_t frozen_parameter_count() {
        return parameter_count(false) - parameter_count(true);
    }

private:
    explicit OnhNet(std::array<const SegCnnSpec*, 3> specs, const EnsemblerSpec& ens,
                    std::uint64_t ens_seed)
        : ens_spec_(ens), ens_seed_(ens_seed) {
        for (int k = 0; k < 3; ++k) {
            cnn_specs_[k] = *specs[k];
            const std::string px = cnn_prefix(k);
            const std::size_t first_param = graph_.parameters().size();
            const SegCnnNodes nodes = build_seg_cnn_into(graph_, cnn_specs_[k], px);
            cnn_logits_[k] = nodes.logits;
            cnn_param_range_[k] = {first_param, graph_.parameters().size()};
        }
        // Everything built so far is a trained pipeline: freeze it.
        graph_.freeze_existing();
        const int cat = graph_.add("ens.concat", std::make_unique<nn::ConcatChannels<S>>(),
                                   {cnn_logits_[0], cnn_logits_[1], cnn_logits_[2]});
        out_node_ = build_ensembler_into(graph_, cat, 3 * kNumClasses, ens_spec_, "ens.");
        // Initialises every layer; the frozen CNN values are then replaced by
        // copy_cnn_params (assembly) or load_checkpoint_params (load).
        Rng rng(ens_seed_);
        Rng init = rng.derive("ensembler-init");
        graph_.init_params(init);
    }

    static std::string cnn_prefix(int k) { return "cnn" + std::to_string(k + 1) + "."; }

    void copy_cnn_params(int k, const std::vector<nn::Param<S>*>& src) {
        auto params = graph_.parameters();
        const auto [first, last] = cnn_param_range_[k];
        if (last - first != src.size()) throw shape_error("CNN parameter list mismatch");
        const std::string px = cnn_prefix(k);
        for (std::size_t i = 0; i < src.size(); ++i) {
            nn::Param<S>* dst = params[first + i];
            if (dst->name != px + src[i]->name)
                throw shape_error("CNN parameter name mismatch: " + dst->name);
            if (dst->value.shape != src[i]->value.shape)
                throw shape_error("CNN parameter shape mismatch: " + dst->name);
            dst->value.data = src[i]->value.data;
        }
    }

    std::array<SegCnnSpec, 3> cnn_specs_;
    EnsemblerSpec ens_spec_;
    std::uint64_t ens_seed_ = 1;
    nn::Graph<S> graph_;
    std::array<int, 3> cnn_logits_ = {0, 0, 0};
    std::array<std::pair<std::size_t, std::size_t>, 3> cnn_param_range_;
    int out_node_ = 0;
};

// ---------------------------------------------------------------------------
// Training. Batch size 1, SGD with Nesterov momentum, soft Jaccard loss.
// ---------------------------------------------------------------------------
struct SegTrainConfig {
    int epochs = 100;
    double lr = 0.01;
    double momentum = 0.05;  // Nesterov
    std::uint64_t seed = 1;
    std::ostream* log = nullptr;
    double stop_at_loss = 0.0;  // early stop on epoch-mean loss; 0 disables
    int log_every = 10;
    // Optional hook called once per epoch with the epoch-mean loss; returning
    // true stops training (used by overfit harnesses with metric targets).
    std::function<bool(int, double)> stop_hook;
};

struct SegTrainResult {
    std::vector<double> epoch_loss;
    long steps = 0;
};

namespace detail {

template <typename S, typename ForwardFn, typename BackwardFn>
SegTrainResult run_seg_training(const std::vector<std::pair<OctVolume, LabelVolume>>& data,
                                const SegTrainConfig& cfg, ForwardFn&& fwd, BackwardFn&& bwd) {
    if (data.empty()) throw data_error("segmentation training needs a non-empty dataset");
    for (const auto& [v, l] : data) {
        check_seg_dims(v);
        if (v.height != l.height || v.width != l.width || v.depth != l.depth)
            throw shape_error("volume/label dims differ");
    }
    Rng rng(cfg.seed);
    Rng order_rng = rng.derive("seg-data-order");

    std::vector<nn::Tensor<S>> inputs;
    for (const auto& [v, l] : data) inputs.push_back(tensor_from_volume<S>(v));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    SegTrainResult result;
    nn::Tensor<S> g_probs;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0;
        for (const std::size_t idx : order) {
            const nn::Tensor<S>& probs = fwd(inputs[idx]);
            if (g_probs.shape != probs.shape) g_probs.resize(probs.shape);
            g_probs.fill(S(0));
            const double loss = soft_jaccard_loss(probs, data[idx].second, &g_probs);
            if (!std::isfinite(loss))
                throw data_error("non-finite segmentation loss at step " +
                                 std::to_string(result.steps));
            bwd(g_probs);
            epoch_loss += loss;
            ++result.steps;
        }
        epoch_loss /= static_cast<double>(data.size());
        result.epoch_loss.push_back(epoch_loss);
        if (cfg.log && (epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs))
            (*cfg.log) << "epoch " << epoch << " jaccard " << epoch_loss << "\n";
        if (cfg.stop_at_loss > 0 && epoch_loss < cfg.stop_at_loss) break;
        if (cfg.stop_hook && cfg.stop_hook(epoch, epoch_loss)) break;
    }
    return result;
}

}  // namespace detail

template <typename S>
SegTrainResult train_seg_cnn(SegCnn<S>& net,
                             const std::vector<std::pair<OctVolume, LabelVolume>>& data,
                             const SegTrainConfig& cfg) {
    nn::SgdNesterov<S> opt(cfg.lr, cfg.momentum);
    auto params = net.graph().parameters();
    Rng rng(cfg.seed);
    Rng dropout_rng = rng.derive("seg-dropout");
    net.graph().set_dropout_rng(&dropout_rng);
    auto res = detail::run_seg_training<S>(
        data, cfg,
        [&](const nn::Tensor<S>& x) -> const nn::Tensor<S>& { return net.forward(x, true); },
        [&](const nn::Tensor<S>& g) {
            net.graph().zero_param_grads();
            net.graph().backward(g);
            opt.step(params);
        });
    net.graph().set_dropout_rng(nullptr);
    return res;
}

// Stage 2: ensembler fine-tuning with the CNN weights frozen.
template <typename S>
SegTrainResult train_ensembler(OnhNet<S>& net,
                               const std::vector<std::pair<OctVolume, LabelVolume>>& data,
                               const SegTrainConfig& cfg) {
    nn::SgdNesterov<S> opt(cfg.lr, cfg.momentum);
    auto params = net.graph().parameters();
    Rng rng(cfg.seed);
    Rng dropout_rng = rng.derive("ensembler-dropout");
    net.graph().set_dropout_rng(&dropout_rng);
    auto res = detail::run_seg_training<S>(
        data, cfg,
        [&](const nn::Tensor<S>& x) -> const nn::Tensor<S>& { return net.forward(x, true); },
        [&](const nn::Tensor<S>& g) {
            net.graph().zero_param_grads();
            net.graph().backward(g);
            opt.step(params);
        });
    net.graph().set_dropout_rng(nullptr);
    return res;
}

}  // namespace oct
