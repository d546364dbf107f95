#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "octpipe/nn/tensor.hpp"
#include "octpipe/rng.hpp"

namespace oct::nn {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// Channel width after applying a width-scale multiplier; never below 1.
inline int scale_ch(int base, double scale) {
    const long v = std::lround(base * scale);
    return v < 1 ? 1 : static_cast<int>(v);
}

template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;  // allocated on first use
    bool trainable = true;
    bool is_buffer = false;  // running statistics etc.; saved but never counted

    void ensure_grad() {
        if (grad.data.size() != value.data.size()) {
            grad.shape = value.shape;
            grad.data.assign(value.data.size(), S(0));
        }
    }
};

struct ExecCtx {
    bool training = false;
    Rng* rng = nullptr;  // consumed by dropout in training mode
};

template <typename S>
struct Layer {
    virtual ~Layer() = default;
    virtual void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out,
                         ExecCtx& ctx) = 0;
    // Accumulates into g_in entries; entries may be null when the producer
    // does not require gradients.
    virtual void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>& out,
                          const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                          ExecCtx& ctx) = 0;
    virtual void collect_params(std::vector<Param<S>*>& out) {}
    virtual void init_params(Rng& rng) {}
};

namespace detail {

inline std::size_t prod(const std::vector<int>& v, std::size_t from = 0) {
    std::size_t n = 1;
    for (std::size_t i = from; i < v.size(); ++i) n *= static_cast<std::size_t>(v[i]);
    return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution, stride 1, same padding, optional dilation. Spatial rank 2 or 3.
// Weight layout {Cout, Cin, k...}; lowered to a GEMM over im2col columns.
// ---------------------------------------------------------------------------
template <typename S>
class Conv final : public Layer<S> {
public:
    Conv(std::string name, int in_ch, int out_ch, std::vector<int> kernel,
         std::vector<int> dilation = {})
        : in_ch_(in_ch), out_ch_(out_ch), kernel_(std::move(kernel)), dilation_(dilation) {
        if (dilation_.empty()) dilation_.assign(kernel_.size(), 1);
        if (dilation_.size() != kernel_.size()) throw shape_error("dilation rank mismatch");
        for (const int k : kernel_)
            if (k < 1 || k % 2 == 0) throw shape_error("conv kernels must be odd");
        std::vector<int> wshape = {out_ch_, in_ch_};
        wshape.insert(wshape.end(), kernel_.begin(), kernel_.end());
        weight_.name = name + ".weight";
        weight_.value.resize(wshape);
        bias_.name = name + ".bias";
        bias_.value.resize({out_ch_});
    }

    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        check_input(x);
        std::vector<int> oshape = x.shape;
        oshape[0] = out_ch_;
        if (out.shape != oshape) out.resize(oshape);

        const std::size_t n = x.spatial_size();
        const std::size_t k = taps() * static_cast<std::size_t>(in_ch_);
        std::vector<S> col(k * n);
        im2col(x, col.data());

        Eigen::Map<const MatRM<S>> w(weight_.value.data.data(), out_ch_, static_cast<long>(k));
        Eigen::Map<const MatCM<S>> c(col.data(), static_cast<long>(k), static_cast<long>(n));
        Eigen::Map<MatRM<S>> o(out.data.data(), out_ch_, static_cast<long>(n));
        o.noalias() = w * c;
        for (int co = 0; co < out_ch_; ++co) o.row(co).array() += bias_.value.data[co];
    }

    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        const std::size_t n = x.spatial_size();
        const std::size_t k = taps() * static_cast<std::size_t>(in_ch_);
        Eigen::Map<const MatRM<S>> go(g_out.data.data(), out_ch_, static_cast<long>(n));

        weight_.ensure_grad();
        bias_.ensure_grad();
        {
            std::vector<S> col(k * n);
            im2col(x, col.data());
            Eigen::Map<const MatCM<S>> c(col.data(), static_cast<long>(k),
                                         static_cast<long>(n));
            Eigen::Map<MatRM<S>> gw(weight_.grad.data.data(), out_ch_, static_cast<long>(k));
            gw.noalias() += go * c.transpose();
        }
        for (int co = 0; co < out_ch_; ++co) bias_.grad.data[co] += go.row(co).sum();

        if (g_in[0]) {
            std::vector<S> gcol(k * n);
            Eigen::Map<const MatRM<S>> w(weight_.value.data.data(), out_ch_,
                                         static_cast<long>(k));
            Eigen::Map<MatCM<S>> gc(gcol.data(), static_cast<long>(k), static_cast<long>(n));
            gc.noalias() = w.transpose() * go;
            col2im_add(gcol.data(), x, *g_in[0]);
        }
    }

    void collect_params(std::vector<Param<S>*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    void init_params(Rng& rng) override {
        // He-normal on fan-in; biases zero.
        const double fan_in = static_cast<double>(taps()) * in_ch_;
        const double stddev = std::sqrt(2.0 / fan_in);
        for (S& v : weight_.value.data) v = static_cast<S>(stddev * rng.normal());
        bias_.value.fill(S(0));
    }

private:
    std::size_t taps() const { return detail::prod(kernel_); }

    void check_input(const Tensor<S>& x) const {
        if (x.shape.size() != kernel_.size() + 1)
            throw shape_error("conv input rank mismatch");
        if (x.shape[0] != in_ch_) throw shape_error("conv input channel mismatch");
    }

    // Column n holds the padded receptive field of output voxel n, one block
    // of taps per input channel. Zero outside the image.
    void im2col(const Tensor<S>& x, S* col) const {
        const int rank = static_cast<int>(kernel_.size());
        const std::size_t ktaps = taps();
        const std::size_t ktotal = ktaps * static_cast<std::size_t>(in_ch_);
        const std::size_t plane = x.spatial_size();
        if (rank == 2) {
            const int H = x.shape[1], W = x.shape[2];
            const int kh = kernel_[0], kw = kernel_[1];
            const int dh = dilation_[0], dw = dilation_[1];
            const int ph = dh * (kh - 1) / 2, pw = dw * (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int h = 0; h < H; ++h) {
                for (int w = 0; w < W; ++w) {
                    S* dst = col + (static_cast<std::size_t>(h) * W + w) * ktotal;
                    for (int ci = 0; ci < in_ch_; ++ci) {
                        const S* src = x.data.data() + ci * plane;
                        for (int a = 0; a < kh; ++a) {
                            const int hh = h + a * dh - ph;
                            for (int b = 0; b < kw; ++b) {
                                const int ww = w + b * dw - pw;
                                *dst++ = (hh >= 0 && hh < H && ww >= 0 && ww < W)
                                             ? src[static_cast<std::size_t>(hh) * W + ww]
                                             : S(0);
                            }
                        }
                    }
                }
            }
        } else {
            const int D = x.shape[1], H = x.shape[2], W = x.shape[3];
            const int kd = kernel_[0], kh = kernel_[1], kw = kernel_[2];
            const int pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int d = 0; d < D; ++d) {
                for (int h = 0; h < H; ++h) {
                    for (int w = 0; w < W; ++w) {
                        S* dst = col + ((static_cast<std::size_t>(d) * H + h) * W + w) * ktotal;
                        for (int ci = 0; ci < in_ch_; ++ci) {
                            const S* src = x.data.data() + ci * plane;
                            for (int a = 0; a < kd; ++a) {
                                const int dd = d + a - pd;
                                const bool din = dd >= 0 && dd < D;
                                for (int b = 0; b < kh; ++b) {
                                    const int hh = h + b - ph;
                                    const bool hin = hh >= 0 && hh < H;
                                    for (int e = 0; e < kw; ++e) {
                                        const int ww = w + e - pw;
                                        *dst++ = (din && hin && ww >= 0 && ww < W)
                                                     ? src[(static_cast<std::size_t>(dd) * H +
                                                            hh) * W + ww]
                                                     : S(0);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (void)ktaps;
    }

    void col2im_add(const S* col, const Tensor<S>& ref, Tensor<S>& g) const {
        const int rank = static_cast<int>(kernel_.size());
        const std::size_t ktaps = taps();
        const std::size_t ktotal = ktaps * static_cast<std::size_t>(in_ch_);
        const std::size_t plane = ref.spatial_size();
        if (rank == 2) {
            const int H = ref.shape[1], W = ref.shape[2];
            const int kh = kernel_[0], kw = kernel_[1];
            const int dh = dilation_[0], dw = dilation_[1];
            const int ph = dh * (kh - 1) / 2, pw = dw * (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int ci = 0; ci < in_ch_; ++ci) {
                S* dst = g.data.data() + ci * plane;
                for (int h = 0; h < H; ++h) {
                    for (int w = 0; w < W; ++w) {
                        const S* src =
                            col + (static_cast<std::size_t>(h) * W + w) * ktotal + ci * ktaps;
                        for (int a = 0; a < kh; ++a) {
                            const int hh = h + a * dh - ph;
                            for (int b = 0; b < kw; ++b) {
                                const int ww = w + b * dw - pw;
                                if (hh >= 0 && hh < H && ww >= 0 && ww < W)
                                    dst[static_cast<std::size_t>(hh) * W + ww] +=
                                        src[a * kw + b];
                            }
                        }
                    }
                }
            }
        } else {
            const int D = ref.shape[1], H = ref.shape[2], W = ref.shape[3];
            const int kd = kernel_[0], kh = kernel_[1], kw = kernel_[2];
            const int pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int ci = 0; ci < in_ch_; ++ci) {
                S* dst = g.data.data() + ci * plane;
                for (int d = 0; d < D; ++d) {
                    for (int h = 0; h < H; ++h) {
                        for (int w = 0; w < W; ++w) {
                            const S* src =
                                col + ((static_cast<std::size_t>(d) * H + h) * W + w) * ktotal +
                                ci * ktaps;
                            for (int a = 0; a < kd; ++a) {
                                const int dd = d + a - pd;
                                if (dd < 0 || dd >= D) continue;
                                for (int b = 0; b < kh; ++b) {
                                    const int hh = h + b - ph;
                                    if (hh < 0 || hh >= H) continue;
                                    for (int e = 0; e < kw; ++e) {
                                        const int ww = w + e - pw;
                                        if (ww < 0 || ww >= W) continue;
                                        dst[(static_cast<std::size_t>(dd) * H + hh) * W + ww] +=
                                            src[(a * kh + b) * kw + e];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    int in_ch_, out_ch_;
    std::vector<int> kernel_, dilation_;
    Param<S> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Transposed convolution, stride 2, exact doubling of every spatial dim
// (padding (k-1)/2, output padding 1). Weight layout {Cin, Cout, k...}.
// ---------------------------------------------------------------------------
template <typename S>
class TransposedConv final : public Layer<S> {
public:
    TransposedConv(std::string name, int in_ch, int out_ch, std::vector<int> kernel)
        : in_ch_(in_ch), out_ch_(out_ch), kernel_(std::move(kernel)) {
        for (const int k : kernel_)
            if (k < 1 || k % 2 == 0) throw shape_error("tconv kernels must be odd");
        std::vector<int> wshape = {in_ch_, out_ch_};
        wshape.insert(wshape.end(), kernel_.begin(), kernel_.end());
        weight_.name = name + ".weight";
        weight_.value.resize(wshape);
        bias_.name = name + ".bias";
        bias_.value.resize({out_ch_});
    }

    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        if (x.shape[0] != in_ch_) throw shape_error("tconv input channel mismatch");
        std::vector<int> oshape = x.shape;
        oshape[0] = out_ch_;
        for (std::size_t i = 1; i < oshape.size(); ++i) oshape[i] *= 2;
        if (out.shape != oshape) out.resize(oshape);
        out.fill(S(0));

        const std::size_t n_in = x.spatial_size();
        const std::size_t kt = detail::prod(kernel_);
        const std::size_t rows = static_cast<std::size_t>(out_ch_) * kt;

        // M[(co,tap), i] = sum_ci w[ci,co,tap] * x[ci,i]
        std::vector<S> m(rows * n_in);
        Eigen::Map<const MatRM<S>> w(weight_.value.data.data(), in_ch_,
                                     static_cast<long>(rows));
        Eigen::Map<const MatRM<S>> xm(x.data.data(), in_ch_, static_cast<long>(n_in));
        Eigen::Map<MatRM<S>> mm(m.data(), static_cast<long>(rows), static_cast<long>(n_in));
        mm.noalias() = w.transpose() * xm;

        scatter_add(m.data(), x, out);
        const std::size_t n_out = out.spatial_size();
        for (int co = 0; co < out_ch_; ++co) {
            S* o = out.data.data() + co * n_out;
            const S b = bias_.value.data[co];
            for (std::size_t i = 0; i < n_out; ++i) o[i] += b;
        }
    }

    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        const std::size_t n_in = x.spatial_size();
        const std::size_t n_out = out.spatial_size();
        const std::size_t kt = detail::prod(kernel_);
        const std::size_t rows = static_cast<std::size_t>(out_ch_) * kt;

        std::vector<S> gm(rows * n_in);
        gather(g_out, x, gm.data());
        Eigen::Map<const MatRM<S>> gmm(gm.data(), static_cast<long>(rows),
                                       static_cast<long>(n_in));

        weight_.ensure_grad();
        bias_.ensure_grad();
        {
            Eigen::Map<const MatRM<S>> xm(x.data.data(), in_ch_, static_cast<long>(n_in));
            Eigen::Map<MatRM<S>> gw(weight_.grad.data.data(), in_ch_, static_cast<long>(rows));
            gw.noalias() += xm * gmm.transpose();
        }
        for (int co = 0; co < out_ch_; ++co) {
            const S* go = g_out.data.data() + co * n_out;
            S acc = S(0);
            for (std::size_t i = 0; i < n_out; ++i) acc += go[i];
            bias_.grad.data[co] += acc;
        }

        if (g_in[0]) {
            Eigen::Map<const MatRM<S>> w(weight_.value.data.data(), in_ch_,
                                         static_cast<long>(rows));
            Eigen::Map<MatRM<S>> gi(g_in[0]->data.data(), in_ch_, static_cast<long>(n_in));
            gi.noalias() += w * gmm;
        }
    }

    void collect_params(std::vector<Param<S>*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    void init_params(Rng& rng) override {
        const double fan_in = static_cast<double>(detail::prod(kernel_)) * in_ch_;
        const double stddev = std::sqrt(2.0 / fan_in);
        for (S& v : weight_.value.data) v = static_cast<S>(stddev * rng.normal());
        bias_.value.fill(S(0));
    }

private:
    // out[co, 2*i - pad + tap] += M[(co,tap), i]
    void scatter_add(const S* m, const Tensor<S>& x, Tensor<S>& out) const {
        const std::size_t kt = detail::prod(kernel_);
        const std::size_t n_in = x.spatial_size();
        const std::size_t n_out = out.spatial_size();
        const int rank = static_cast<int>(kernel_.size());
        if (rank == 2) {
            const int H = x.shape[1], W = x.shape[2];
            const int OH = 2 * H, OW = 2 * W;
            const int kh = kernel_[0], kw = kernel_[1];
            const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int co = 0; co < out_ch_; ++co) {
                S* o = out.data.data() + co * n_out;
                const S* mc = m + static_cast<std::size_t>(co) * kt * n_in;
                for (int a = 0; a < kh; ++a) {
                    for (int b = 0; b < kw; ++b) {
                        const S* mt = mc + (static_cast<std::size_t>(a) * kw + b) * n_in;
                        for (int h = 0; h < H; ++h) {
                            const int oh = 2 * h - ph + a;
                            if (oh < 0 || oh >= OH) continue;
                            for (int w = 0; w < W; ++w) {
                                const int ow = 2 * w - pw + b;
                                if (ow < 0 || ow >= OW) continue;
                                o[static_cast<std::size_t>(oh) * OW + ow] +=
                                    mt[static_cast<std::size_t>(h) * W + w];
                            }
                        }
                    }
                }
            }
        } else {
            const int D = x.shape[1], H = x.shape[2], W = x.shape[3];
            const int OD = 2 * D, OH = 2 * H, OW = 2 * W;
            const int kd = kernel_[0], kh = kernel_[1], kw = kernel_[2];
            const int pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int co = 0; co < out_ch_; ++co) {
                S* o = out.data.data() + co * n_out;
                const S* mc = m + static_cast<std::size_t>(co) * kt * n_in;
                for (int a = 0; a < kd; ++a)
                    for (int b = 0; b < kh; ++b)
                        for (int e = 0; e < kw; ++e) {
                            const S* mt =
                                mc + ((static_cast<std::size_t>(a) * kh + b) * kw + e) * n_in;
                            for (int d = 0; d < D; ++d) {
                                const int od = 2 * d - pd + a;
                                if (od < 0 || od >= OD) continue;
                                for (int h = 0; h < H; ++h) {
                                    const int oh = 2 * h - ph + b;
                                    if (oh < 0 || oh >= OH) continue;
                                    for (int w = 0; w < W; ++w) {
                                        const int ow = 2 * w - pw + e;
                                        if (ow < 0 || ow >= OW) continue;
                                        o[(static_cast<std::size_t>(od) * OH + oh) * OW + ow] +=
                                            mt[(static_cast<std::size_t>(d) * H + h) * W + w];
                                    }
                                }
                            }
                        }
            }
        }
    }

    // gm[(co,tap), i] = g_out[co, 2*i - pad + tap], zero outside
    void gather(const Tensor<S>& g_out, const Tensor<S>& x, S* gm) const {
        const std::size_t kt = detail::prod(kernel_);
        const std::size_t n_in = x.spatial_size();
        const std::size_t n_out = g_out.spatial_size();
        const int rank = static_cast<int>(kernel_.size());
        if (rank == 2) {
            const int H = x.shape[1], W = x.shape[2];
            const int OH = 2 * H, OW = 2 * W;
            const int kh = kernel_[0], kw = kernel_[1];
            const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int co = 0; co < out_ch_; ++co) {
                const S* go = g_out.data.data() + co * n_out;
                S* mc = gm + static_cast<std::size_t>(co) * kt * n_in;
                for (int a = 0; a < kh; ++a)
                    for (int b = 0; b < kw; ++b) {
                        S* mt = mc + (static_cast<std::size_t>(a) * kw + b) * n_in;
                        for (int h = 0; h < H; ++h) {
                            const int oh = 2 * h - ph + a;
                            for (int w = 0; w < W; ++w) {
                                const int ow = 2 * w - pw + b;
                                mt[static_cast<std::size_t>(h) * W + w] =
                                    (oh >= 0 && oh < OH && ow >= 0 && ow < OW)
                                        ? go[static_cast<std::size_t>(oh) * OW + ow]
                                        : S(0);
                            }
                        }
                    }
            }
        } else {
            const int D = x.shape[1], H = x.shape[2], W = x.shape[3];
            const int OD = 2 * D, OH = 2 * H, OW = 2 * W;
            const int kd = kernel_[0], kh = kernel_[1], kw = kernel_[2];
            const int pd = (kd - 1) / 2, ph = (kh - 1) / 2, pw = (kw - 1) / 2;
#pragma omp parallel for schedule(static)
            for (int co = 0; co < out_ch_; ++co) {
                const S* go = g_out.data.data() + co * n_out;
                S* mc = gm + static_cast<std::size_t>(co) * kt * n_in;
                for (int a = 0; a < kd; ++a)
                    for (int b = 0; b < kh; ++b)
                        for (int e = 0; e < kw; ++e) {
                            S* mt = mc + ((static_cast<std::size_t>(a) * kh + b) * kw + e) * n_in;
                            for (int d = 0; d < D; ++d) {
                                const int od = 2 * d - pd + a;
                                const bool din = od >= 0 && od < OD;
                                for (int h = 0; h < H; ++h) {
                                    const int oh = 2 * h - ph + b;
                                    const bool hin = oh >= 0 && oh < OH;
                                    for (int w = 0; w < W; ++w) {
                                        const int ow = 2 * w - pw + e;
                                        mt[(static_cast<std::size_t>(d) * H + h) * W + w] =
                                            (din && hin && ow >= 0 && ow < OW)
                                                ? go[(static_cast<std::size_t>(od) * OH + oh) *
                                                         OW + ow]
                                                : S(0);
                                    }
                                }
                            }
                        }
            }
        }
    }

    int in_ch_, out_ch_;
    std::vector<int> kernel_;
    Param<S> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Max pooling, kernel 2, stride 2, all spatial dims. Dims must be even.
// ---------------------------------------------------------------------------
template <typename S>
class MaxPool final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        std::vector<int> oshape = x.shape;
        for (std::size_t i = 1; i < oshape.size(); ++i) {
            if (oshape[i] % 2 != 0) throw shape_error("max pool needs even spatial dims");
            oshape[i] /= 2;
        }
        if (out.shape != oshape) out.resize(oshape);
        argmax_.assign(out.numel(), 0);

        const int C = x.shape[0];
        const std::size_t in_plane = x.spatial_size();
        const std::size_t out_plane = out.spatial_size();
        const int rank = static_cast<int>(x.shape.size()) - 1;
        if (rank == 2) {
            const int H = x.shape[1], W = x.shape[2];
            const int OH = H / 2, OW = W / 2;
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const S* src = x.data.data() + c * in_plane;
                S* dst = out.data.data() + c * out_plane;
                std::size_t* am = argmax_.data() + c * out_plane;
                for (int h = 0; h < OH; ++h)
                    for (int w = 0; w < OW; ++w) {
                        std::size_t best = static_cast<std::size_t>(2 * h) * W + 2 * w;
                        S bv = src[best];
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b) {
                                const std::size_t idx =
                                    static_cast<std::size_t>(2 * h + a) * W + (2 * w + b);
                                if (src[idx] > bv) {
                                    bv = src[idx];
                                    best = idx;
                                }
                            }
                        dst[static_cast<std::size_t>(h) * OW + w] = bv;
                        am[static_cast<std::size_t>(h) * OW + w] = best;
                    }
            }
        } else {
            const int D = x.shape[1], H = x.shape[2], W = x.shape[3];
            const int OD = D / 2, OH = H / 2, OW = W / 2;
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const S* src = x.data.data() + c * in_plane;
                S* dst = out.data.data() + c * out_plane;
                std::size_t* am = argmax_.data() + c * out_plane;
                for (int d = 0; d < OD; ++d)
                    for (int h = 0; h < OH; ++h)
                        for (int w = 0; w < OW; ++w) {
                            std::size_t best =
                                (static_cast<std::size_t>(2 * d) * H + 2 * h) * W + 2 * w;
                            S bv = src[best];
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    for (int e = 0; e < 2; ++e) {
                                        const std::size_t idx =
                                            (static_cast<std::size_t>(2 * d + a) * H +
                                             (2 * h + b)) * W + (2 * w + e);
                                        if (src[idx] > bv) {
                                            bv = src[idx];
                                            best = idx;
                                        }
                                    }
                            const std::size_t oidx =
                                (static_cast<std::size_t>(d) * OH + h) * OW + w;
                            dst[oidx] = bv;
                            am[oidx] = best;
                        }
            }
        }
    }

    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        const int C = out.shape[0];
        const std::size_t in_plane = in[0]->spatial_size();
        const std::size_t out_plane = out.spatial_size();
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            const S* go = g_out.data.data() + c * out_plane;
            S* gi = g_in[0]->data.data() + c * in_plane;
            const std::size_t* am = argmax_.data() + c * out_plane;
            for (std::size_t i = 0; i < out_plane; ++i) gi[am[i]] += go[i];
        }
    }

private:
    std::vector<std::size_t> argmax_;
};

// ---------------------------------------------------------------------------
// Linear interpolation upsampling by an integer factor (bilinear/trilinear),
// half-pixel-centre convention.
// ---------------------------------------------------------------------------
template <typename S>
class UpsampleLinear final : public Layer<S> {
public:
    explicit UpsampleLinear(int factor) : factor_(factor) {
        if (factor < 2) throw shape_error("upsample factor must be >= 2");
    }

    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        std::vector<int> oshape = x.shape;
        for (std::size_t i = 1; i < oshape.size(); ++i) oshape[i] *= factor_;
        if (out.shape != oshape) out.resize(oshape);
        build_taps(x.shape);

        const int C = x.shape[0];
        const std::size_t in_plane = x.spatial_size();
        const std::size_t out_plane = out.spatial_size();
        const int rank = static_cast<int>(x.shape.size()) - 1;
        if (rank == 2) {
            const int W = x.shape[2];
            const int OH = out.shape[1], OW = out.shape[2];
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const S* src = x.data.data() + c * in_plane;
                S* dst = out.data.data() + c * out_plane;
                for (int h = 0; h < OH; ++h) {
                    const auto& th = taps_[0][h];
                    for (int w = 0; w < OW; ++w) {
                        const auto& tw = taps_[1][w];
                        const double v =
                            (1 - th.f) * ((1 - tw.f) * src[static_cast<std::size_t>(th.lo) * W + tw.lo] +
                                          tw.f * src[static_cast<std::size_t>(th.lo) * W + tw.hi]) +
                            th.f * ((1 - tw.f) * src[static_cast<std::size_t>(th.hi) * W + tw.lo] +
                                    tw.f * src[static_cast<std::size_t>(th.hi) * W + tw.hi]);
                        dst[static_cast<std::size_t>(h) * OW + w] = static_cast<S>(v);
                    }
                }
            }
        } else {
            const int H = x.shape[2], W = x.shape[3];
            const int OD = out.shape[1], OH = out.shape[2], OW = out.shape[3];
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const S* src = x.data.data() + c * in_plane;
                S* dst = out.data.data() + c * out_plane;
                for (int d = 0; d < OD; ++d) {
                    const auto& td = taps_[0][d];
                    for (int h = 0; h < OH; ++h) {
                        const auto& th = taps_[1][h];
                        for (int w = 0; w < OW; ++w) {
                            const auto& tw = taps_[2][w];
                            double v = 0;
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    for (int e = 0; e < 2; ++e) {
                                        const double wt = (a ? td.f : 1 - td.f) *
                                                          (b ? th.f : 1 - th.f) *
                                                          (e ? tw.f : 1 - tw.f);
                                        if (wt == 0) continue;
                                        v += wt * src[(static_cast<std::size_t>(a ? td.hi : td.lo) * H +
                                                       (b ? th.hi : th.lo)) * W + (e ? tw.hi : tw.lo)];
                                    }
                            dst[(static_cast<std::size_t>(d) * OH + h) * OW + w] =
                                static_cast<S>(v);
                        }
                    }
                }
            }
        }
    }

    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        const Tensor<S>& x = *in[0];
        const int C = x.shape[0];
        const std::size_t in_plane = x.spatial_size();
        const std::size_t out_plane = out.spatial_size();
        const int rank = static_cast<int>(x.shape.size()) - 1;
        if (rank == 2) {
            const int W = x.shape[2];
            const int OH = out.shape[1], OW = out.shape[2];
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const S* go = g_out.data.data() + c * out_plane;
                S* gi = g_in[0]->data.data() + c * in_plane;
                for (int h = 0; h < OH; ++h) {
                    const auto& th = taps_[0][h];
                    for (int w = 0; w < OW; ++w) {
                        const auto& tw = taps_[1][w];
                        const double g = go[static_cast<std::size_t>(h) * OW + w];
                        gi[static_cast<std::size_t>(th.lo) * W + tw.lo] +=
                            static_cast<S>((1 - th.f) * (1 - tw.f) * g);
                        gi[static_cast<std::size_t>(th.lo) * W + tw.hi] +=
                            static_cast<S>((1 - th.f) * tw.f * g);
                        gi[static_cast<std::size_t>(th.hi) * W + tw.lo] +=
                            static_cast<S>(th.f * (1 - tw.f) * g);
                        gi[static_cast<std::size_t>(th.hi) * W + tw.hi] +=
                            static_cast<S>(th.f * tw.f * g);
                    }
                }
            }
        } else {
            const int H = x.shape[2], W = x.shape[3];
            const int OD = out.shape[1], OH = out.shape[2], OW = out.shape[3];
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const S* go = g_out.data.data() + c * out_plane;
                S* gi = g_in[0]->data.data() + c * in_plane;
                for (int d = 0; d < OD; ++d) {
                    const auto& td = taps_[0][d];
                    for (int h = 0; h < OH; ++h) {
                        const auto& th = taps_[1][h];
                        for (int w = 0; w < OW; ++w) {
                            const auto& tw = taps_[2][w];
                            const double g = go[(static_cast<std::size_t>(d) * OH + h) * OW + w];
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    for (int e = 0; e < 2; ++e) {
                                        const double wt = (a ? td.f : 1 - td.f) *
                                                          (b ? th.f : 1 - th.f) *
                                                          (e ? tw.f : 1 - tw.f);
                                        if (wt == 0) continue;
                                        gi[(static_cast<std::size_t>(a ? td.hi : td.lo) * H +
                                            (b ? th.hi : th.lo)) * W + (e ? tw.hi : tw.lo)] +=
                                            static_cast<S>(wt * g);
                                    }
                        }
                    }
                }
            }
        }
    }

private:
    struct Tap {
        int lo, hi;
        double f;
    };

    void build_taps(const std::vector<int>& in_shape) {
        taps_.clear();
        for (std::size_t axis = 1; axis < in_shape.size(); ++axis) {
            const int n = in_shape[axis];
            const int on = n * factor_;
            std::vector<Tap> t(on);
            for (int o = 0; o < on; ++o) {
                const double c = (o + 0.5) / factor_ - 0.5;
                double fl = std::floor(c);
                int lo = static_cast<int>(fl);
                double f = c - fl;
                if (lo < 0) {
                    lo = 0;
                    f = 0;
                }
                int hi = lo + 1;
                if (hi > n - 1) {
                    hi = n - 1;
                    lo = std::min(lo, hi);
                    f = 0;
                }
                t[o] = {lo, hi, f};
            }
            taps_.push_back(std::move(t));
        }
    }

    int factor_;
    std::vector<std::vector<Tap>> taps_;
};

// ---------------------------------------------------------------------------
// Batch normalisation over the spatial dims of each channel (batch size is
// always 1 here). Training mode uses batch statistics and updates running
// averages; eval mode uses the running averages.
// ---------------------------------------------------------------------------
template <typename S>
class BatchNorm final : public Layer<S> {
public:
    explicit BatchNorm(std::string name, int channels, double momentum = 0.1,
                       double eps = 1e-5)
        : channels_(channels), momentum_(momentum), eps_(eps) {
        gamma_.name = name + ".gamma";
        gamma_.value.resize({channels});
        gamma_.value.fill(S(1));
        beta_.name = name + ".beta";
        beta_.value.resize({channels});
        run_mean_.name = name + ".running_mean";
        run_mean_.value.resize({channels});
        run_mean_.trainable = false;
        run_mean_.is_buffer = true;
        run_var_.name = name + ".running_var";
        run_var_.value.resize({channels});
        run_var_.value.fill(S(1));
        run_var_.trainable = false;
        run_var_.is_buffer = true;
    }

    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx& ctx) override {
        const Tensor<S>& x = *in[0];
        if (x.shape[0] != channels_) throw shape_error("batch norm channel mismatch");
        if (out.shape != x.shape) out.resize(x.shape);
        const std::size_t n = x.spatial_size();
        mean_.assign(channels_, S(0));
        inv_std_.assign(channels_, S(0));
        training_ = ctx.training;
#pragma omp parallel for schedule(static)
        for (int c = 0; c < channels_; ++c) {
            const S* src = x.data.data() + c * n;
            S* dst = out.data.data() + c * n;
            double mean, var;
            if (ctx.training) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) s += src[i];
                mean = s / static_cast<double>(n);
                double v = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = src[i] - mean;
                    v += d * d;
                }
                var = v / static_cast<double>(n);
                run_mean_.value.data[c] = static_cast<S>(
                    (1 - momentum_) * run_mean_.value.data[c] + momentum_ * mean);
                run_var_.value.data[c] =
                    static_cast<S>((1 - momentum_) * run_var_.value.data[c] + momentum_ * var);
            } else {
                mean = run_mean_.value.data[c];
                var = run_var_.value.data[c];
            }
            const double inv = 1.0 / std::sqrt(var + eps_);
            mean_[c] = static_cast<S>(mean);
            inv_std_[c] = static_cast<S>(inv);
            const double g = gamma_.value.data[c], b = beta_.value.data[c];
            for (std::size_t i = 0; i < n; ++i)
                dst[i] = static_cast<S>((src[i] - mean) * inv * g + b);
        }
    }

    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>&,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        const std::size_t n = x.spatial_size();
        gamma_.ensure_grad();
        beta_.ensure_grad();
#pragma omp parallel for schedule(static)
        for (int c = 0; c < channels_; ++c) {
            const S* src = x.data.data() + c * n;
            const S* go = g_out.data.data() + c * n;
            const double mean = mean_[c], inv = inv_std_[c];
            const double g = gamma_.value.data[c];
            double sum_g = 0, sum_gx = 0;
            for (std::size_t i = 0; i < n; ++i) {
                sum_g += go[i];
                sum_gx += go[i] * (src[i] - mean) * inv;
            }
            gamma_.grad.data[c] += static_cast<S>(sum_gx);
            beta_.grad.data[c] += static_cast<S>(sum_g);
            if (!g_in[0]) continue;
            S* gi = g_in[0]->data.data() + c * n;
            if (training_) {
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const double xh = (src[i] - mean) * inv;
                    gi[i] += static_cast<S>(g * inv * (go[i] - inv_n * sum_g - inv_n * xh * sum_gx));
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) gi[i] += static_cast<S>(g * inv * go[i]);
            }
        }
    }

    void collect_params(std::vector<Param<S>*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
        out.push_back(&run_mean_);
        out.push_back(&run_var_);
    }

private:
    int channels_;
    double momentum_, eps_;
    bool training_ = false;
    Param<S> gamma_, beta_, run_mean_, run_var_;
    std::vector<S> mean_, inv_std_;
};

// ---------------------------------------------------------------------------
// Elementwise activations. Derivatives are recovered from the outputs.
// ---------------------------------------------------------------------------
template <typename S>
class Elu final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        if (out.shape != x.shape) out.resize(x.shape);
        const std::size_t n = x.numel();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            const S v = x.data[i];
            out.data[i] = v > S(0) ? v : static_cast<S>(std::expm1(static_cast<double>(v)));
        }
    }
    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        const std::size_t n = out.numel();
        const Tensor<S>& x = *in[0];
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            const S d = x.data[i] > S(0) ? S(1) : out.data[i] + S(1);
            g_in[0]->data[i] += g_out.data[i] * d;
        }
    }
};

template <typename S>
class Relu final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        if (out.shape != x.shape) out.resize(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i)
            out.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
    }
    void backward(const std::vector<const Tensor<S>*>&, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        for (std::size_t i = 0; i < out.numel(); ++i)
            if (out.data[i] > S(0)) g_in[0]->data[i] += g_out.data[i];
    }
};

template <typename S>
class Sigmoid final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        if (out.shape != x.shape) out.resize(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i)
            out.data[i] = static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(x.data[i]))));
    }
    void backward(const std::vector<const Tensor<S>*>&, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        for (std::size_t i = 0; i < out.numel(); ++i) {
            const S y = out.data[i];
            g_in[0]->data[i] += g_out.data[i] * y * (S(1) - y);
        }
    }
};

// Per-voxel softmax across the channel dim.
template <typename S>
class SoftmaxChannels final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x = *in[0];
        if (out.shape != x.shape) out.resize(x.shape);
        const int C = x.shape[0];
        const std::size_t n = x.spatial_size();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            double mx = -1e300;
            for (int c = 0; c < C; ++c)
                mx = std::max(mx, static_cast<double>(x.data[c * n + i]));
            double sum = 0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(static_cast<double>(x.data[c * n + i]) - mx);
                out.data[c * n + i] = static_cast<S>(e);
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int c = 0; c < C; ++c)
                out.data[c * n + i] = static_cast<S>(out.data[c * n + i] * inv);
        }
    }
    void backward(const std::vector<const Tensor<S>*>&, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        const int C = out.shape[0];
        const std::size_t n = out.spatial_size();
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            double dot = 0;
            for (int c = 0; c < C; ++c)
                dot += static_cast<double>(g_out.data[c * n + i]) * out.data[c * n + i];
            for (int c = 0; c < C; ++c)
                g_in[0]->data[c * n + i] += static_cast<S>(
                    out.data[c * n + i] * (static_cast<double>(g_out.data[c * n + i]) - dot));
        }
    }
};

// ---------------------------------------------------------------------------
// Structural layers.
// ---------------------------------------------------------------------------
template <typename S>
class Add final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        const Tensor<S>& x0 = *in[0];
        for (const auto* t : in)
            if (t->shape != x0.shape) throw shape_error("add operands must match");
        if (out.shape != x0.shape) out.resize(x0.shape);
        out.data = x0.data;
        for (std::size_t j = 1; j < in.size(); ++j)
            for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += in[j]->data[i];
    }
    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>&,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        for (std::size_t j = 0; j < in.size(); ++j) {
            if (!g_in[j]) continue;
            for (std::size_t i = 0; i < g_out.numel(); ++i) g_in[j]->data[i] += g_out.data[i];
        }
    }
};

template <typename S>
class ConcatChannels final : public Layer<S> {
public:
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx&) override {
        int total = 0;
        for (const auto* t : in) {
            if (t->shape.size() != in[0]->shape.size()) throw shape_error("concat rank mismatch");
            for (std::size_t i = 1; i < t->shape.size(); ++i)
                if (t->shape[i] != in[0]->shape[i]) throw shape_error("concat spatial mismatch");
            total += t->shape[0];
        }
        std::vector<int> oshape = in[0]->shape;
        oshape[0] = total;
        if (out.shape != oshape) out.resize(oshape);
        std::size_t off = 0;
        for (const auto* t : in) {
            std::copy(t->data.begin(), t->data.end(), out.data.begin() + off);
            off += t->numel();
        }
    }
    void backward(const std::vector<const Tensor<S>*>& in, const Tensor<S>&,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        std::size_t off = 0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            const std::size_t n = in[j]->numel();
            if (g_in[j])
                for (std::size_t i = 0; i < n; ++i) g_in[j]->data[i] += g_out.data[off + i];
            off += n;
        }
    }
};

// Inverted dropout; identity in eval mode. Draws its mask from the session
// RNG so training runs are reproducible.
template <typename S>
class Dropout final : public Layer<S> {
public:
    explicit Dropout(double p) : p_(p) {
        if (p < 0 || p >= 1) throw data_error("dropout rate must be in [0,1)");
    }
    void forward(const std::vector<const Tensor<S>*>& in, Tensor<S>& out, ExecCtx& ctx) override {
        const Tensor<S>& x = *in[0];
        if (out.shape != x.shape) out.resize(x.shape);
        if (!ctx.training || p_ == 0.0) {
            active_ = false;
            out.data = x.data;
            return;
        }
        if (!ctx.rng) throw error("dropout needs a session rng in training mode");
        active_ = true;
        mask_.resize(x.numel());
        const S scale = static_cast<S>(1.0 / (1.0 - p_));
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const bool keep = ctx.rng->uniform() >= p_;
            mask_[i] = keep ? scale : S(0);
            out.data[i] = x.data[i] * mask_[i];
        }
    }
    void backward(const std::vector<const Tensor<S>*>&, const Tensor<S>& out,
                  const Tensor<S>& g_out, const std::vector<Tensor<S>*>& g_in,
                  ExecCtx&) override {
        if (!g_in[0]) return;
        if (!active_) {
            for (std::size_t i = 0; i < out.numel(); ++i) g_in[0]->data[i] += g_out.data[i];
            return;
        }
        for (std::size_t i = 0; i < out.numel(); ++i)
            g_in[0]->data[i] += g_out.data[i] * mask_[i];
    }

private:
    double p_;
    bool active_ = false;
    std::vector<S> mask_;
};

}  // namespace oct::nn
