#include "mmkd/model.hpp"

#include <cmath>

#include "json.hpp"
#include "mmkd/container.hpp"
#include "mmkd/errors.hpp"
#include "mmkd/hash.hpp"
#include "mmkd/ops.hpp"
#include "mmkd/rng.hpp"

using nlohmann::json;

namespace mmkd::model {

using namespace mmkd::ad;

void VisualEncoderSpec::validate() const {
    if (grid_rows < 1 || grid_cols < 1) throw ConfigError("visual encoder grid must be at least 1x1");
    if (patch_pixels < 1) throw ConfigError("patch_pixels must be positive");
    if (visual_dim < 1) throw ConfigError("visual_dim must be positive");
}

namespace {

// One fixed pixel mask per shape so patches carry intra-cell structure.
const uint16_t kGlyphs[data::kNumShapes][4] = {
    {0b0110, 0b1001, 0b1001, 0b0110}, // circle: ring
    {0b1111, 0b1001, 0b1001, 0b1111}, // square: border
    {0b0010, 0b0110, 0b1110, 0b0000}, // triangle: wedge
};

} // namespace

VisualEncoder::VisualEncoder(const VisualEncoderSpec& spec) : spec_(spec) {
    spec_.validate();
    Rng rng(spec_.seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec_.patch_dim()));
    weight_.resize(static_cast<size_t>(spec_.patch_dim()) * spec_.visual_dim);
    for (double& w : weight_) w = rng.normal() * scale;
    bias_.resize(static_cast<size_t>(spec_.visual_dim));
    for (double& b : bias_) b = rng.normal() * 0.1;
}

Tensor VisualEncoder::encode(const data::ToyImage& image) const {
    if (image.rows != spec_.grid_rows || image.cols != spec_.grid_cols) {
        throw DimensionError("image grid " + std::to_string(image.rows) + "x" +
                             std::to_string(image.cols) + " does not match encoder grid " +
                             std::to_string(spec_.grid_rows) + "x" + std::to_string(spec_.grid_cols));
    }
    const int p = spec_.patch_pixels;
    const int ch = spec_.channels();
    const int pd = spec_.patch_dim();
    const int dv = spec_.visual_dim;

    std::vector<double> patch(static_cast<size_t>(pd));
    std::vector<double> z(static_cast<size_t>(spec_.n_visual_tokens()) * dv);
    for (int cell = 0; cell < spec_.n_visual_tokens(); ++cell) {
        std::fill(patch.begin(), patch.end(), 0.0);
        const int code = image.cells[static_cast<size_t>(cell)];
        if (code != 0) {
            const int channel = code - 1;
            const int shape = (code - 1) % data::kNumShapes;
            for (int py = 0; py < p; ++py) {
                // glyph masks are 4 wide; tile for larger patches
                const uint16_t row_bits = kGlyphs[shape][py % 4];
                for (int px = 0; px < p; ++px) {
                    if (row_bits & (1u << (3 - px % 4))) {
                        patch[static_cast<size_t>(py * p + px) * ch + channel] = 1.0;
                    }
                }
            }
        }
        double* out = z.data() + static_cast<size_t>(cell) * dv;
        for (int j = 0; j < dv; ++j) out[j] = bias_[static_cast<size_t>(j)];
        for (int i = 0; i < pd; ++i) {
            const double x = patch[static_cast<size_t>(i)];
            if (x == 0.0) continue;
            const double* wrow = weight_.data() + static_cast<size_t>(i) * dv;
            for (int j = 0; j < dv; ++j) out[j] += x * wrow[j];
        }
    }
    return Tensor::from_data({spec_.n_visual_tokens(), dv}, std::move(z));
}

uint64_t VisualEncoder::param_hash() const {
    uint64_t h = fnv1a64(weight_);
    return fnv1a64(bias_, h);
}

void ModelSpec::validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (num_layers < 1) throw ConfigError("num_layers must be positive");
    if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0) {
        throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                          " must be a positive multiple of num_heads " + std::to_string(num_heads));
    }
    if (max_seq < 2) throw ConfigError("max_seq must be at least 2");
    if (visual_dim < 1) throw ConfigError("visual_dim must be positive");
    if (ffn_mult < 1) throw ConfigError("ffn_mult must be positive");
    if (role != "teacher" && role != "student") {
        throw ConfigError("model role must be 'teacher' or 'student', got '" + role + "'");
    }
}

ModelSpec teacher_spec() { return ModelSpec{}; }

ModelSpec student_spec() {
    ModelSpec s;
    s.num_layers = 2;
    s.hidden_dim = 64;
    s.num_heads = 2;
    s.role = "student";
    return s;
}

namespace {

Tensor param_randn(const Shape& shape, Rng& rng, double scale) {
    return Tensor::randn(shape, rng, scale).set_requires_grad(true);
}

Tensor param_full(const Shape& shape, double v) {
    return Tensor::full(shape, v).set_requires_grad(true);
}

} // namespace

TransformerLM TransformerLM::init(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    TransformerLM lm;
    lm.spec_ = spec;
    Rng rng(seed);
    const int d = spec.hidden_dim;
    const double s = 0.02;

    lm.tok_emb = param_randn({spec.vocab_size, d}, rng, s);
    lm.pos_emb = param_randn({spec.max_seq, d}, rng, 0.01);
    lm.proj_visual_w = param_randn({spec.visual_dim, d}, rng, s);
    for (int l = 0; l < spec.num_layers; ++l) {
        Layer layer;
        layer.ln1_gain = param_full({d}, 1.0);
        layer.ln1_bias = param_full({d}, 0.0);
        layer.wq = param_randn({d, d}, rng, s);
        layer.wk = param_randn({d, d}, rng, s);
        layer.wv = param_randn({d, d}, rng, s);
        layer.wo = param_randn({d, d}, rng, s);
        layer.ln2_gain = param_full({d}, 1.0);
        layer.ln2_bias = param_full({d}, 0.0);
        layer.ffn_w1 = param_randn({d, spec.ffn_mult * d}, rng, s);
        layer.ffn_b1 = param_full({spec.ffn_mult * d}, 0.0);
        layer.ffn_w2 = param_randn({spec.ffn_mult * d, d}, rng, s);
        layer.ffn_b2 = param_full({d}, 0.0);
        lm.layers.push_back(std::move(layer));
    }
    lm.final_gain = param_full({d}, 1.0);
    lm.final_bias = param_full({d}, 0.0);
    lm.head_w = param_randn({d, spec.vocab_size}, rng, s);
    return lm;
}

Tensor TransformerLM::project_visual(const Tensor& z_v) const {
    if (z_v.cols() != spec_.visual_dim) {
        throw DimensionError("visual features " + shape_str(z_v.shape()) +
                             " do not match projector input dim " +
                             std::to_string(spec_.visual_dim));
    }
    return matmul(z_v, proj_visual_w);
}

LMOutputs TransformerLM::forward(const Tensor& h_v, const std::vector<int>& ids,
                                 int n_visual) const {
    const int seq = static_cast<int>(ids.size());
    if (seq > spec_.max_seq) {
        throw DimensionError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                             std::to_string(spec_.max_seq));
    }
    if (n_visual < 1 || seq < n_visual + 2) {
        throw ContractError("sequence must hold BOS, " + std::to_string(n_visual) +
                            " visual positions, and at least one text token");
    }
    if (h_v.rows() != n_visual || h_v.cols() != spec_.hidden_dim) {
        throw DimensionError("visual prefix " + shape_str(h_v.shape()) + " does not match " +
                             std::to_string(n_visual) + " tokens of width " +
                             std::to_string(spec_.hidden_dim));
    }

    Tensor bos = ad::embed(tok_emb, {ids[0]});
    Tensor text = ad::embed(tok_emb, std::vector<int>(ids.begin() + 1 + n_visual, ids.end()));
    Tensor x = ad::add(ad::concat_rows({bos, h_v, text}), ad::slice_rows(pos_emb, 0, seq));

    std::vector<double> maskv(static_cast<size_t>(seq) * seq, 0.0);
    for (int i = 0; i < seq; ++i) {
        for (int j = i + 1; j < seq; ++j) maskv[static_cast<size_t>(i) * seq + j] = -1e9;
    }
    const Tensor causal = Tensor::from_data({seq, seq}, std::move(maskv));

    const int dh = spec_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    LMOutputs out;
    for (const Layer& layer : layers) {
        Tensor h1 = ad::layer_norm(x, layer.ln1_gain, layer.ln1_bias);
        Tensor q = ad::matmul(h1, layer.wq);
        Tensor k = ad::matmul(h1, layer.wk);
        Tensor v = ad::matmul(h1, layer.wv);

        std::vector<Tensor> head_probs;
        Tensor attn_out;
        for (int h = 0; h < spec_.num_heads; ++h) {
            Tensor qh = ad::slice_cols(q, h * dh, dh);
            Tensor kh = ad::slice_cols(k, h * dh, dh);
            Tensor vh = ad::slice_cols(v, h * dh, dh);
            Tensor scores = ad::add(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dh), causal);
            Tensor probs = ad::softmax_t(scores, 1.0);
            head_probs.push_back(probs);
            Tensor proj = ad::matmul(ad::matmul(probs, vh), ad::slice_rows(layer.wo, h * dh, dh));
            attn_out = h == 0 ? proj : ad::add(attn_out, proj);
        }
        x = ad::add(x, attn_out);

        Tensor h2 = ad::layer_norm(x, layer.ln2_gain, layer.ln2_bias);
        Tensor f = ad::add_bias(ad::matmul(h2, layer.ffn_w1), layer.ffn_b1);
        f = ad::add_bias(ad::matmul(ad::gelu(f), layer.ffn_w2), layer.ffn_b2);
        x = ad::add(x, f);

        out.hidden_states.push_back(x);
        out.attention.push_back(std::move(head_probs));
    }
    out.logits = ad::matmul(ad::layer_norm(x, final_gain, final_bias), head_w);
    return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerLM::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> named;
    named.emplace_back("tok_emb", tok_emb);
    named.emplace_back("pos_emb", pos_emb);
    named.emplace_back("proj_visual", proj_visual_w);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const Layer& layer = layers[l];
        named.emplace_back(p + "ln1_gain", layer.ln1_gain);
        named.emplace_back(p + "ln1_bias", layer.ln1_bias);
        named.emplace_back(p + "wq", layer.wq);
        named.emplace_back(p + "wk", layer.wk);
        named.emplace_back(p + "wv", layer.wv);
        named.emplace_back(p + "wo", layer.wo);
        named.emplace_back(p + "ln2_gain", layer.ln2_gain);
        named.emplace_back(p + "ln2_bias", layer.ln2_bias);
        named.emplace_back(p + "ffn_w1", layer.ffn_w1);
        named.emplace_back(p + "ffn_b1", layer.ffn_b1);
        named.emplace_back(p + "ffn_w2", layer.ffn_w2);
        named.emplace_back(p + "ffn_b2", layer.ffn_b2);
    }
    named.emplace_back("final_gain", final_gain);
    named.emplace_back("final_bias", final_bias);
    named.emplace_back("head_w", head_w);
    return named;
}

std::vector<Tensor> TransformerLM::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

void TransformerLM::set_trainable(bool on) {
    for (auto& t : parameters()) Tensor(t).set_requires_grad(on);
}

uint64_t TransformerLM::param_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_parameters()) {
        h = fnv1a64(name, h);
        h = fnv1a64(t.value(), h);
    }
    return h;
}

namespace {

Tensor copy_param(const Tensor& t) {
    Tensor c = Tensor::from_data(t.shape(), t.value());
    c.set_requires_grad(t.requires_grad());
    return c;
}

} // namespace

TransformerLM TransformerLM::clone() const {
    TransformerLM c;
    c.spec_ = spec_;
    c.tok_emb = copy_param(tok_emb);
    c.pos_emb = copy_param(pos_emb);
    c.proj_visual_w = copy_param(proj_visual_w);
    for (const Layer& layer : layers) {
        Layer lc;
        lc.ln1_gain = copy_param(layer.ln1_gain);
        lc.ln1_bias = copy_param(layer.ln1_bias);
        lc.wq = copy_param(layer.wq);
        lc.wk = copy_param(layer.wk);
        lc.wv = copy_param(layer.wv);
        lc.wo = copy_param(layer.wo);
        lc.ln2_gain = copy_param(layer.ln2_gain);
        lc.ln2_bias = copy_param(layer.ln2_bias);
        lc.ffn_w1 = copy_param(layer.ffn_w1);
        lc.ffn_b1 = copy_param(layer.ffn_b1);
        lc.ffn_w2 = copy_param(layer.ffn_w2);
        lc.ffn_b2 = copy_param(layer.ffn_b2);
        c.layers.push_back(std::move(lc));
    }
    c.final_gain = copy_param(final_gain);
    c.final_bias = copy_param(final_bias);
    c.head_w = copy_param(head_w);
    return c;
}

std::vector<int> generate(const TransformerLM& lm, const VisualEncoder& encoder,
                          const data::ToyImage& image, const std::vector<int>& prompt_ids,
                          int n_visual, int max_new, int eos_id) {
    if (prompt_ids.empty()) throw ContractError("generate: empty prompt");
    if (max_new < 0) throw ParameterError("generate: max_new must be non-negative");

    NoGradGuard no_grad;
    const Tensor z_v = encoder.encode(image);
    const Tensor h_v = lm.project_visual(z_v);

    std::vector<int> ids = prompt_ids;
    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(ids.size()) >= lm.spec().max_seq) break;
        LMOutputs out = lm.forward(h_v, ids, n_visual);
        const auto& logits = out.logits.value();
        const int c = out.logits.cols();
        const double* last = logits.data() + logits.size() - static_cast<size_t>(c);
        int best = 0;
        for (int j = 1; j < c; ++j) {
            if (last[j] > last[best]) best = j;
        }
        if (best == eos_id) break;
        generated.push_back(best);
        ids.push_back(best);
    }
    return generated;
}

TransformerLM init_student_from_teacher(const TransformerLM& teacher, int keep_every) {
    const ModelSpec& tspec = teacher.spec();
    if (keep_every < 1 || tspec.num_layers % keep_every != 0) {
        throw ConfigError("cannot keep every " + std::to_string(keep_every) + "th of " +
                          std::to_string(tspec.num_layers) + " layers");
    }
    ModelSpec sspec = tspec;
    sspec.num_layers = tspec.num_layers / keep_every;
    sspec.role = "student";

    TransformerLM student = TransformerLM::init(sspec, 0);
    student.tok_emb = copy_param(teacher.tok_emb);
    student.pos_emb = copy_param(teacher.pos_emb);
    student.proj_visual_w = copy_param(teacher.proj_visual_w);
    for (int l = 0; l < sspec.num_layers; ++l) {
        const TransformerLM::Layer& src = teacher.layers[static_cast<size_t>(l) * keep_every];
        TransformerLM::Layer& dst = student.layers[static_cast<size_t>(l)];
        dst.ln1_gain = copy_param(src.ln1_gain);
        dst.ln1_bias = copy_param(src.ln1_bias);
        dst.wq = copy_param(src.wq);
        dst.wk = copy_param(src.wk);
        dst.wv = copy_param(src.wv);
        dst.wo = copy_param(src.wo);
        dst.ln2_gain = copy_param(src.ln2_gain);
        dst.ln2_bias = copy_param(src.ln2_bias);
        dst.ffn_w1 = copy_param(src.ffn_w1);
        dst.ffn_b1 = copy_param(src.ffn_b1);
        dst.ffn_w2 = copy_param(src.ffn_w2);
        dst.ffn_b2 = copy_param(src.ffn_b2);
    }
    student.final_gain = copy_param(teacher.final_gain);
    student.final_bias = copy_param(teacher.final_bias);
    student.head_w = copy_param(teacher.head_w);
    student.set_trainable(true);
    return student;
}

namespace {

json spec_to_json(const ModelSpec& s) {
    return json{{"vocab_size", s.vocab_size}, {"num_layers", s.num_layers},
                {"hidden_dim", s.hidden_dim}, {"num_heads", s.num_heads},
                {"max_seq", s.max_seq},       {"visual_dim", s.visual_dim},
                {"ffn_mult", s.ffn_mult},     {"role", s.role}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    s.vocab_size = j.at("vocab_size").get<int>();
    s.num_layers = j.at("num_layers").get<int>();
    s.hidden_dim = j.at("hidden_dim").get<int>();
    s.num_heads = j.at("num_heads").get<int>();
    s.max_seq = j.at("max_seq").get<int>();
    s.visual_dim = j.at("visual_dim").get<int>();
    s.ffn_mult = j.at("ffn_mult").get<int>();
    s.role = j.at("role").get<std::string>();
    s.validate();
    return s;
}

json encoder_spec_to_json(const VisualEncoderSpec& s) {
    return json{{"grid_rows", s.grid_rows},
                {"grid_cols", s.grid_cols},
                {"patch_pixels", s.patch_pixels},
                {"visual_dim", s.visual_dim},
                {"seed", s.seed}};
}

VisualEncoderSpec encoder_spec_from_json(const json& j) {
    VisualEncoderSpec s;
    s.grid_rows = j.at("grid_rows").get<int>();
    s.grid_cols = j.at("grid_cols").get<int>();
    s.patch_pixels = j.at("patch_pixels").get<int>();
    s.visual_dim = j.at("visual_dim").get<int>();
    s.seed = j.at("seed").get<uint64_t>();
    s.validate();
    return s;
}

} // namespace

void save_model(const TransformerLM& lm, const VisualEncoderSpec& enc_spec,
                const std::string& path) {
    std::vector<io::ArrayRecord> arrays;
    for (const auto& [name, t] : lm.named_parameters()) {
        arrays.push_back({name, t.shape(), t.value()});
    }
    json meta{{"spec", spec_to_json(lm.spec())}, {"encoder", encoder_spec_to_json(enc_spec)}};
    io::write_container(path, "model", meta, arrays);
}

LoadedModel load_model(const std::string& path) {
    io::Container c = io::read_container(path, "model");
    ModelSpec spec;
    VisualEncoderSpec enc_spec;
    try {
        spec = spec_from_json(c.meta.at("spec"));
        enc_spec = encoder_spec_from_json(c.meta.at("encoder"));
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("model '" + path + "' metadata: " + e.what());
    }

    TransformerLM lm = TransformerLM::init(spec, 0);
    for (auto& [name, t] : lm.named_parameters()) {
        const io::ArrayRecord& rec = c.array(name);
        if (rec.shape != t.shape()) {
            throw IoError("model '" + path + "': array '" + name + "' has shape " +
                          shape_str(rec.shape) + ", expected " + shape_str(t.shape()));
        }
        Tensor(t).mutable_value() = rec.data;
    }
    return LoadedModel{std::move(lm), enc_spec};
}

} // namespace mmkd::model
