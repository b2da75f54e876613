#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hrtse/autodiff.hpp"
#include "hrtse/rng.hpp"

namespace hrtse::nn {

using ad::Var;

// Named registry of trainable leaves. Modules register their weights here so
// the optimizer, checkpoints, and determinism checks see one flat list.
class Params {
  public:
    Var add(const std::string& name, Tensor init);
    Var find(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
    int64_t numel() const;
    void zero_grads();
    double grad_norm() const;
    uint64_t value_hash() const;

  private:
    std::vector<std::pair<std::string, Var>> items_;
    std::unordered_map<std::string, size_t> index_;
};

Tensor init_uniform(Rng& rng, std::vector<int> shape, int fan_in);

struct Linear {
    Var W, b;  // W [in, out]
    Linear() = default;
    Linear(Params& P, const std::string& name, int in, int out, Rng& rng,
           bool bias = true);
    Var operator()(const Var& x) const;  // [N, in] -> [N, out]
};

struct Conv1dLayer {
    Var W, b;  // W [Cout, Cin, K]
    int dilation = 1;
    Conv1dLayer() = default;
    Conv1dLayer(Params& P, const std::string& name, int cin, int cout, int k,
                int dilation, Rng& rng);
    Var operator()(const Var& x) const;  // [Cin, T] -> [Cout, T]
};

struct Conv2dDownLayer {
    Var W, b;  // W [Cout, Cin, 3, 3], stride 1x2 on frequency
    Conv2dDownLayer() = default;
    Conv2dDownLayer(Params& P, const std::string& name, int cin, int cout,
                    Rng& rng);
    Var operator()(const Var& x) const;  // [Cin, T, F] -> [Cout, T, (F-3)/2+1]
};

struct ConvT2dUpLayer {
    Var W, b;  // W [Cin, Cout, 3, 3]
    int out_pad = 0;
    ConvT2dUpLayer() = default;
    ConvT2dUpLayer(Params& P, const std::string& name, int cin, int cout,
                   int out_pad, Rng& rng);
    Var operator()(const Var& x) const;  // [Cin, T, F] -> [Cout, T, (F-1)*2+3+pad]
};

struct BiLstm {
    Var wx_f, wh_f, b_f, wx_b, wh_b, b_b;
    int hidden = 0;
    BiLstm() = default;
    BiLstm(Params& P, const std::string& name, int input, int hidden, Rng& rng);
    Var operator()(const Var& x) const;  // [S, B, I] -> [S, B, 2H]
};

struct LayerNormLayer {
    Var gamma, beta;
    LayerNormLayer() = default;
    LayerNormLayer(Params& P, const std::string& name, int dim);
    Var operator()(const Var& x) const;  // normalizes the last axis
};

struct ChannelNormLayer {
    Var gamma, beta;
    ChannelNormLayer() = default;
    ChannelNormLayer(Params& P, const std::string& name, int channels);
    Var operator()(const Var& x) const;  // [C, ...] per-channel statistics
};

struct PReluLayer {
    Var alpha;
    PReluLayer() = default;
    PReluLayer(Params& P, const std::string& name, int channels);
    Var operator()(const Var& x) const;  // [C, ...]
};

// Bidirectional recurrent block augmented with single-head self-attention and
// a x4 feedforward sub-block; residual + layer norm around each sub-block.
// The recurrent sub-block adds its residual only when input width == hidden.
struct ArnBlock {
    int input_dim = 0, hidden = 0;
    BiLstm rnn;
    Linear rnn_proj;  // 2H -> H
    LayerNormLayer ln_rnn;
    Linear wq, wk, wv;
    LayerNormLayer ln_att;
    Linear ff1, ff2;  // H -> 4H -> H
    LayerNormLayer ln_ff;
    ArnBlock() = default;
    ArnBlock(Params& P, const std::string& name, int input_dim, int hidden,
             Rng& rng);
    Var operator()(const Var& x) const;  // [S, B, input_dim] -> [S, B, hidden]
};

// Squeeze-excitation channel gating for [C, T] features.
struct SeBlock {
    Linear down, up;
    int channels = 0;
    SeBlock() = default;
    SeBlock(Params& P, const std::string& name, int channels, int se_channels,
            Rng& rng);
    Var operator()(const Var& x) const;
};

// conv1d -> ReLU -> per-channel norm.
struct TdnnBlock {
    Conv1dLayer conv;
    ChannelNormLayer norm;
    TdnnBlock() = default;
    TdnnBlock(Params& P, const std::string& name, int cin, int cout, int k,
              int dilation, Rng& rng);
    Var operator()(const Var& x) const;
};

// Scale-wise split with cascaded dilated convolutions on [C, T].
struct Res2NetBlock {
    int scale = 8, width = 0;
    std::vector<TdnnBlock> blocks;
    Res2NetBlock() = default;
    Res2NetBlock(Params& P, const std::string& name, int channels, int k,
                 int dilation, int scale, Rng& rng);
    Var operator()(const Var& x) const;
};

struct SeRes2NetBlock {
    TdnnBlock in1x1, out1x1;
    Res2NetBlock res;
    SeBlock se;
    bool residual = false;
    SeRes2NetBlock() = default;
    SeRes2NetBlock(Params& P, const std::string& name, int cin, int channels,
                   int k, int dilation, int scale, int se_channels, bool residual,
                   Rng& rng);
    Var operator()(const Var& x) const;
};

// Attention-weighted mean + standard deviation over time; weights per frame
// sum to one. [C, T] -> [2C].
struct AttentiveStatsPool {
    Linear att1, att2;
    int channels = 0;
    AttentiveStatsPool() = default;
    AttentiveStatsPool(Params& P, const std::string& name, int channels,
                       int bottleneck, Rng& rng);
    Var operator()(const Var& x, Var* att_weights = nullptr) const;
};

class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8, double clip_norm = 5.0);
    void step(Params& params);  // clips by global norm, updates, clears grads
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    double last_grad_norm() const { return last_norm_; }
    int64_t steps() const { return t_; }

  private:
    double lr_, beta1_, beta2_, eps_, clip_;
    double last_norm_ = 0.0;
    int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace hrtse::nn
