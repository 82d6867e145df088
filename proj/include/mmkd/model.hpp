#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmkd/data.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd::model {

using ad::Tensor;

// Frozen random linear patch featurizer. Each grid cell renders to a
// patch_pixels² block of one-hot object channels (empty cells render to
// zeros), and every patch is mapped by the same fixed affine map to a
// visual_dim feature row. The weights are derived from the seed and never
// receive gradients.
struct VisualEncoderSpec {
    int grid_rows = 4;
    int grid_cols = 4;
    int patch_pixels = 4;
    int visual_dim = 32;
    uint64_t seed = 2024;

    int n_visual_tokens() const { return grid_rows * grid_cols; }
    int channels() const { return data::kNumCellCodes - 1; }
    int patch_dim() const { return patch_pixels * patch_pixels * channels(); }
    void validate() const;
};

class VisualEncoder {
public:
    explicit VisualEncoder(const VisualEncoderSpec& spec);

    const VisualEncoderSpec& spec() const { return spec_; }
    // Z_v: one feature row per grid cell; constant (never part of a graph).
    Tensor encode(const data::ToyImage& image) const;
    uint64_t param_hash() const;

private:
    VisualEncoderSpec spec_;
    std::vector<double> weight_; // patch_dim x visual_dim
    std::vector<double> bias_;   // visual_dim
};

struct ModelSpec {
    int vocab_size = 512;
    int num_layers = 4;
    int hidden_dim = 128;
    int num_heads = 4;
    int max_seq = 128;
    int visual_dim = 32;
    int ffn_mult = 2;
    std::string role = "teacher";

    int head_dim() const { return hidden_dim / num_heads; }
    void validate() const;
};

// Teacher and student sizes used across the experiments.
ModelSpec teacher_spec();
ModelSpec student_spec();

struct LMOutputs {
    Tensor logits;                                // seq x vocab
    std::vector<Tensor> hidden_states;            // per layer, seq x hidden
    std::vector<std::vector<Tensor>> attention;   // [layer][head], seq x seq post-softmax
};

class TransformerLM {
public:
    struct Layer {
        Tensor ln1_gain, ln1_bias;
        Tensor wq, wk, wv, wo;
        Tensor ln2_gain, ln2_bias;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    static TransformerLM init(const ModelSpec& spec, uint64_t seed);

    const ModelSpec& spec() const { return spec_; }

    // H_v = Z_v · W; the projector has no bias so zero features stay zero.
    Tensor project_visual(const Tensor& z_v) const;

    // ids must follow the tokenizer layout: ids[0] is BOS and ids[1..n_visual]
    // are the placeholder positions that h_v rows substitute for.
    LMOutputs forward(const Tensor& h_v, const std::vector<int>& ids, int n_visual) const;

    // Stable-order access for the optimizer and checkpoints.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    void set_trainable(bool on);
    uint64_t param_hash() const;
    TransformerLM clone() const;

    Tensor tok_emb, pos_emb, proj_visual_w, final_gain, final_bias, head_w;
    std::vector<Layer> layers;

private:
    TransformerLM() = default;
    ModelSpec spec_;
};

// Greedy decoding. Returns only the generated continuation (EOS excluded);
// stops at eos_id or after max_new tokens.
std::vector<int> generate(const TransformerLM& lm, const VisualEncoder& encoder,
                          const data::ToyImage& image, const std::vector<int>& prompt_ids,
                          int n_visual, int max_new, int eos_id);

// Depth pruning: keeps teacher layers 0, keep_every, 2·keep_every, … and
// copies embeddings, projector, final norm, and head.
TransformerLM init_student_from_teacher(const TransformerLM& teacher, int keep_every);

void save_model(const TransformerLM& lm, const VisualEncoderSpec& enc_spec,
                const std::string& path);
struct LoadedModel {
    TransformerLM lm;
    VisualEncoderSpec encoder_spec;
};
LoadedModel load_model(const std::string& path);

} // namespace mmkd::model
