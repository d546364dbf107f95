#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "octpipe/nn/layers.hpp"

namespace oct::nn {

// A static DAG of layers built in topological order. Node 0 is the input.
// Forward runs nodes in insertion order; backward runs them in reverse,
// accumulating gradients, and skips subgraphs that cannot influence any
// trainable parameter (or the input, when input gradients are requested).
template <typename S>
class Graph {
public:
    Graph() { nodes_.emplace_back(); /* input node */ }

    int add(std::string name, std::unique_ptr<Layer<S>> layer, std::vector<int> inputs) {
        for (const int i : inputs)
            if (i < 0 || i >= static_cast<int>(nodes_.size()))
                throw shape_error("graph input id out of range: " + name);
        Node n;
        n.name = std::move(name);
        n.layer = std::move(layer);
        n.inputs = std::move(inputs);
        nodes_.push_back(std::move(n));
        output_ = static_cast<int>(nodes_.size()) - 1;
        return output_;
    }

    void set_output(int node) { output_ = node; }
    int output_node() const { return output_; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }

    void set_input_requires_grad(bool v) { input_requires_grad_ = v; }
    void set_dropout_rng(Rng* rng) { rng_ = rng; }

    // Marks every node added so far as frozen: its params stop being
    // trainable and the node always executes in eval mode (so batch-norm
    // running statistics stay untouched).
    void freeze_existing() {
        for (auto& n : nodes_) {
            n.frozen = true;
            if (!n.layer) continue;
            std::vector<Param<S>*> ps;
            n.layer->collect_params(ps);
            for (auto* p : ps) p->trainable = false;
        }
    }

    const Tensor<S>& forward(const Tensor<S>& input, bool training = false) {
        nodes_[0].out = input;
        ExecCtx ctx;
        ctx.rng = rng_;
        std::vector<const Tensor<S>*> ins;
        for (std::size_t i = 1; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            ins.clear();
            for (const int j : n.inputs) ins.push_back(&nodes_[j].out);
            ctx.training = training && !n.frozen;
            n.layer->forward(ins, n.out, ctx);
        }
        return nodes_[output_].out;
    }

    // Backward from a single seed at the output node.
    void backward(const Tensor<S>& g_output) {
        backward_multi({{output_, &g_output}});
    }

    // Backward from seeds at arbitrary nodes (used for multi-tap losses).
    void backward_multi(const std::vector<std::pair<int, const Tensor<S>*>>& seeds) {
        refresh_requires();
        for (auto& n : nodes_) {
            if (!n.requires) continue;
            if (n.grad.shape != n.out.shape) n.grad.resize(n.out.shape);
            n.grad.fill(S(0));
        }
        for (const auto& [node, g] : seeds) {
            Node& n = nodes_[node];
            if (!n.requires) continue;
            if (g->shape != n.out.shape) throw shape_error("gradient seed shape mismatch");
            for (std::size_t i = 0; i < n.grad.numel(); ++i) n.grad.data[i] += g->data[i];
        }
        ExecCtx ctx;
        ctx.rng = rng_;
        std::vector<const Tensor<S>*> ins;
        std::vector<Tensor<S>*> gins;
        for (std::size_t i = nodes_.size(); i-- > 1;) {
            Node& n = nodes_[i];
            if (!n.requires) continue;
            ins.clear();
            gins.clear();
            bool any_consumer = false;
            for (const int j : n.inputs) {
                ins.push_back(&nodes_[j].out);
                gins.push_back(nodes_[j].requires ? &nodes_[j].grad : nullptr);
                any_consumer = true;
            }
            (void)any_consumer;
            ctx.training = !n.frozen;
            n.layer->backward(ins, n.out, n.grad, gins, ctx);
        }
    }

    void zero_param_grads() {
        for (auto* p : parameters()) {
            p->ensure_grad();
            p->grad.fill(S(0));
        }
    }

    std::vector<Param<S>*> parameters() {
        std::vector<Param<S>*> out;
        for (auto& n : nodes_) {
            if (n.layer) n.layer->collect_params(out);
        }
        return out;
    }

    void init_params(Rng& rng) {
        for (auto& n : nodes_)
            if (n.layer) n.layer->init_params(rng);
    }

    // Weight-count of the network; buffers (running statistics) excluded.
    std::int64_t parameter_count(bool trainable_only = false) {
        std::int64_t total = 0;
        for (auto* p : parameters()) {
            if (p->is_buffer) continue;
            if (trainable_only && !p->trainable) continue;
            total += static_cast<std::int64_t>(p->value.numel());
        }
        return total;
    }

    Tensor<S>& node_output(int node) { return nodes_[node].out; }
    Tensor<S>& node_grad(int node) { return nodes_[node].grad; }
    Tensor<S>& input_grad() { return nodes_[0].grad; }
    const std::string& node_name(int node) const { return nodes_[node].name; }

private:
    struct Node {
        std::string name;
        std::unique_ptr<Layer<S>> layer;  // null for the input node
        std::vector<int> inputs;
        Tensor<S> out, grad;
        bool requires = false;
        bool frozen = false;
    };

    void refresh_requires() {
        nodes_[0].requires = input_requires_grad_;
        for (std::size_t i = 1; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            bool req = false;
            for (const int j : n.inputs) req = req || nodes_[j].requires;
            if (!req && n.layer) {
                std::vector<Param<S>*> ps;
                n.layer->collect_params(ps);
                for (auto* p : ps) req = req || p->trainable;
            }
            n.requires = req;
        }
    }

    std::vector<Node> nodes_;
    int output_ = 0;
    bool input_requires_grad_ = false;
    Rng* rng_ = nullptr;
};

}  // namespace oct::nn
