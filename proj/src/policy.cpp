// SPDX-License-Identifier: Apache-2.0
#include "unisd/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "unisd/errors.hpp"
#include "unisd/rng.hpp"

namespace unisd {

namespace {

enum Slot : std::size_t { kTokEmb = 0, kPosEmb = 1, kFirstLayer = 2 };
constexpr std::size_t kPerLayer = 8;
enum LayerSlot : std::size_t { kLn1 = 0, kQkv, kAttnOut, kLn2, kFc, kFcBias, kProj, kProjBias };

std::size_t layer_slot(int layer, LayerSlot s) { return kFirstLayer + static_cast<std::size_t>(layer) * kPerLayer + s; }
std::size_t final_norm_slot(const ArchConfig& a) { return kFirstLayer + static_cast<std::size_t>(a.layers) * kPerLayer; }
std::size_t head_slot(const ArchConfig& a) { return final_norm_slot(a) + 1; }

Error parameter_error(const std::string& what) { return Error(ErrorKind::parameter, what); }

Matrix slot_matrix(const PolicyParameters& p, std::size_t i) {
    const ParamSlice& s = p.shape_table[i];
    Matrix m(s.rows, s.cols);
    std::copy_n(p.values.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), m.data.begin());
    return m;
}

// Unpacked weights for the incremental decoder.
struct Weights {
    std::vector<Matrix> slots;
    explicit Weights(const PolicyParameters& p) {
        slots.reserve(p.shape_table.size());
        for (std::size_t i = 0; i < p.shape_table.size(); ++i) slots.push_back(slot_matrix(p, i));
    }
    const Matrix& operator[](std::size_t i) const { return slots[i]; }
};

/// Incremental decoder keeping packed q/k/v rows per layer. Each appended token runs
/// the same row kernels as the taped forward, so values match a full recomputation.
class Decoder {
public:
    explicit Decoder(const PolicyParameters& p) : arch_(p.arch), w_(p) {
        const int d = arch_.d_model;
        for (int l = 0; l < arch_.layers; ++l) cache_.emplace_back(arch_.window, 3 * d);
        x_.resize(static_cast<std::size_t>(d));
        h_.resize(static_cast<std::size_t>(d));
        att_.resize(static_cast<std::size_t>(d));
        tmp_.resize(static_cast<std::size_t>(d));
        ff_.resize(static_cast<std::size_t>(d * arch_.mlp_ratio));
        probs_.resize(static_cast<std::size_t>(arch_.window));
        logits_.resize(static_cast<std::size_t>(arch_.vocab));
    }

    int position() const { return pos_; }

    /// Feeds one token and returns the next-token logits.
    const std::vector<double>& push(Token t) {
        if (pos_ >= arch_.window) throw WindowError("decoder exceeded the context window");
        if (t < 0 || t >= arch_.vocab) throw Error(ErrorKind::dimension, "token id out of range");
        const int d = arch_.d_model;
        const int hd = d / arch_.heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
        const auto te = w_[kTokEmb].row(t);
        const auto pe = w_[kPosEmb].row(pos_);
        for (int j = 0; j < d; ++j) x_[j] = te[j] + pe[j];
        for (int l = 0; l < arch_.layers; ++l) {
            Matrix& cache = cache_[static_cast<std::size_t>(l)];
            ad::kernels::rmsnorm_row(x_, w_[layer_slot(l, kLn1)].row(0), h_);
            ad::kernels::matmul_row(h_, w_[layer_slot(l, kQkv)], cache.row(pos_));
            const std::size_t stride = static_cast<std::size_t>(3 * d);
            for (int hh = 0; hh < arch_.heads; ++hh) {
                const double* q = cache.data.data() + pos_ * stride + static_cast<std::size_t>(hh * hd);
                const double* k = cache.data.data() + static_cast<std::size_t>(d + hh * hd);
                const double* v = cache.data.data() + static_cast<std::size_t>(2 * d + hh * hd);
                ad::kernels::attention_row(q, k, v, stride, pos_ + 1, hd, sc, probs_.data(), att_.data() + hh * hd);
            }
            ad::kernels::matmul_row(att_, w_[layer_slot(l, kAttnOut)], tmp_);
            for (int j = 0; j < d; ++j) x_[j] = x_[j] + tmp_[j];
            ad::kernels::rmsnorm_row(x_, w_[layer_slot(l, kLn2)].row(0), h_);
            ad::kernels::matmul_row(h_, w_[layer_slot(l, kFc)], ff_);
            const auto fb = w_[layer_slot(l, kFcBias)].row(0);
            for (std::size_t j = 0; j < ff_.size(); ++j) ff_[j] = ad::kernels::gelu(ff_[j] + fb[j]);
            ad::kernels::matmul_row(ff_, w_[layer_slot(l, kProj)], tmp_);
            const auto pb = w_[layer_slot(l, kProjBias)].row(0);
            for (int j = 0; j < d; ++j) tmp_[j] = tmp_[j] + pb[j];
            for (int j = 0; j < d; ++j) x_[j] = x_[j] + tmp_[j];
        }
        ad::kernels::rmsnorm_row(x_, w_[final_norm_slot(arch_)].row(0), h_);
        ad::kernels::matmul_row(h_, w_[head_slot(arch_)], logits_);
        ++pos_;
        return logits_;
    }

private:
    ArchConfig arch_;
    Weights w_;
    std::vector<Matrix> cache_;
    std::vector<double> x_, h_, att_, tmp_, ff_, probs_, logits_;
    int pos_ = 0;
};

void log_softmax_inplace(std::vector<double>& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double z = 0.0;
    for (double x : v) z += std::exp(x - mx);
    const double lse = mx + std::log(z);
    for (double& x : v) x = x - lse;
}

}  // namespace

void validate(const ArchConfig& a) {
    if (a.vocab < 2 || a.d_model < 1 || a.layers < 1 || a.heads < 1 || a.window < 2 || a.mlp_ratio < 1) {
        throw ConfigError("architecture dimensions must be positive (vocab >= 2, window >= 2)");
    }
    if (a.d_model % a.heads != 0) {
        throw ConfigError("d_model=" + std::to_string(a.d_model) + " is not divisible by heads=" + std::to_string(a.heads));
    }
    if (!(a.init_std > 0.0) || !std::isfinite(a.init_std)) throw ConfigError("init_std must be positive");
}

std::string to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw ConfigError("unsupported dtype '" + s + "'");
}

const ParamSlice& PolicyParameters::slice(const std::string& name) const {
    for (const auto& s : shape_table) {
        if (s.name == name) return s;
    }
    throw parameter_error("no parameter slice named '" + name + "'");
}

std::span<double> PolicyParameters::view(const std::string& name) {
    const ParamSlice& s = slice(name);
    return {values.data() + s.offset, s.size()};
}

std::span<const double> PolicyParameters::view(const std::string& name) const {
    const ParamSlice& s = slice(name);
    return {values.data() + s.offset, s.size()};
}

std::vector<ParamSlice> layout(const ArchConfig& a) {
    validate(a);
    std::vector<ParamSlice> out;
    std::size_t off = 0;
    const auto add = [&](std::string name, int r, int c) {
        out.push_back(ParamSlice{std::move(name), off, r, c});
        off += static_cast<std::size_t>(r) * c;
    };
    const int d = a.d_model;
    const int m = a.d_model * a.mlp_ratio;
    add("tok_emb", a.vocab, d);
    add("pos_emb", a.window, d);
    for (int l = 0; l < a.layers; ++l) {
        const std::string p = "h" + std::to_string(l) + ".";
        add(p + "ln1", 1, d);
        add(p + "qkv", d, 3 * d);
        add(p + "attn_out", d, d);
        add(p + "ln2", 1, d);
        add(p + "fc", d, m);
        add(p + "fc_bias", 1, m);
        add(p + "proj", m, d);
        add(p + "proj_bias", 1, d);
    }
    add("ln_f", 1, d);
    add("head", d, a.vocab);
    return out;
}

PolicyParameters init_policy(const ArchConfig& arch, std::uint64_t seed) {
    PolicyParameters p;
    p.arch = arch;
    p.shape_table = layout(arch);
    const auto& last = p.shape_table.back();
    p.values.assign(last.offset + last.size(), 0.0);
    Rng rng(derive_seed(seed, "init_policy"));
    const double resid_std = arch.init_std / std::sqrt(2.0 * arch.layers);
    for (const auto& s : p.shape_table) {
        auto v = std::span<double>(p.values.data() + s.offset, s.size());
        const bool is_gain = s.name.ends_with("ln1") || s.name.ends_with("ln2") || s.name == "ln_f";
        const bool is_bias = s.name.ends_with("_bias");
        if (is_gain) {
            std::fill(v.begin(), v.end(), 1.0);
        } else if (is_bias) {
            std::fill(v.begin(), v.end(), 0.0);
        } else {
            const bool resid = s.name.ends_with("attn_out") || s.name.ends_with(".proj");
            const double sd = resid ? resid_std : arch.init_std;
            for (double& x : v) x = sd * standard_normal(rng);
        }
    }
    return p;
}

void check_invariants(const PolicyParameters& params) {
    std::size_t expect = 0;
    for (const auto& s : params.shape_table) {
        if (s.offset != expect) throw parameter_error("slice '" + s.name + "' leaves a gap or overlaps");
        expect += s.size();
    }
    if (expect != params.values.size()) throw parameter_error("shape table does not cover the parameter vector");
    for (double v : params.values) {
        if (!std::isfinite(v)) throw parameter_error("non-finite parameter value");
    }
}

std::uint64_t fingerprint(const PolicyParameters& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : params.values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

Trajectory sample_completion(const PolicyParameters& params, const Tokens& context, double temperature, int max_len,
                             std::uint64_t seed) {
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (static_cast<int>(context.size()) + max_len > params.arch.window) {
        throw WindowError("context of " + std::to_string(context.size()) + " tokens plus max_len " +
                          std::to_string(max_len) + " exceeds window " + std::to_string(params.arch.window));
    }
    Trajectory tr;
    tr.prompt = context;
    tr.temperature = temperature;
    Decoder dec(params);
    Rng rng(derive_seed(seed, "sample_completion"));

    const std::vector<double>* logits = &dec.push(tok::bos);
    for (Token t : context) logits = &dec.push(t);
    std::vector<double> lp;
    for (int step = 0; step < max_len; ++step) {
        if (step > 0) logits = &dec.push(tr.completion.back());
        lp = *logits;
        Token chosen = 0;
        if (temperature == 0.0) {
            for (std::size_t j = 1; j < lp.size(); ++j) {
                if (lp[j] > lp[static_cast<std::size_t>(chosen)]) chosen = static_cast<Token>(j);
            }
            log_softmax_inplace(lp);
        } else {
            for (double& x : lp) x = x / temperature;
            log_softmax_inplace(lp);
            const double u = uniform01(rng);
            double cum = 0.0;
            chosen = -1;
            for (std::size_t j = 0; j < lp.size(); ++j) {
                cum += std::exp(lp[j]);
                if (u < cum) {
                    chosen = static_cast<Token>(j);
                    break;
                }
            }
            if (chosen < 0) {
                for (std::size_t j = lp.size(); j-- > 0;) {
                    if (std::isfinite(lp[j]) && lp[j] > -700.0) {
                        chosen = static_cast<Token>(j);
                        break;
                    }
                }
            }
        }
        if (chosen < 0 || std::isnan(lp[static_cast<std::size_t>(chosen)])) {
            throw NumericError("sampling distribution is not finite");
        }
        tr.completion.push_back(chosen);
        tr.sample_logprobs.push_back(std::min(0.0, lp[static_cast<std::size_t>(chosen)]));
        tr.mask.push_back(1.0);
        if (chosen == tok::eos) break;
    }
    return tr;
}

PackedInput pack_input(const ArchConfig& arch, const Tokens& condition, const Tokens& prompt, const Tokens& completion) {
    if (completion.empty()) throw Error(ErrorKind::dimension, "completion must contain at least one token");
    const long fixed = 1 + static_cast<long>(prompt.size()) + static_cast<long>(completion.size()) - 1;
    if (fixed > arch.window) {
        throw WindowError("prompt and completion (" + std::to_string(fixed) + " positions) exceed window " +
                          std::to_string(arch.window));
    }
    const long room = arch.window - fixed;
    const long keep = std::min<long>(room, static_cast<long>(condition.size()));
    PackedInput in;
    in.condition_kept = static_cast<int>(keep);
    in.tokens.reserve(static_cast<std::size_t>(fixed + keep));
    in.tokens.push_back(tok::bos);
    in.tokens.insert(in.tokens.end(), condition.end() - keep, condition.end());
    in.tokens.insert(in.tokens.end(), prompt.begin(), prompt.end());
    in.tokens.insert(in.tokens.end(), completion.begin(), completion.end() - 1);
    in.first_row = static_cast<int>(keep + static_cast<long>(prompt.size()));
    return in;
}

ModelBinding bind(ad::Tape& tape, const PolicyParameters& params, bool trainable) {
    ModelBinding b;
    b.params = &params;
    b.slots.reserve(params.shape_table.size());
    for (const auto& s : params.shape_table) {
        std::span<const double> v(params.values.data() + s.offset, s.size());
        if (trainable) {
            b.slots.push_back(tape.parameter(v, s.rows, s.cols, s.offset));
        } else {
            Matrix m(s.rows, s.cols);
            std::copy(v.begin(), v.end(), m.data.begin());
            b.slots.push_back(tape.constant(std::move(m)));
        }
    }
    return b;
}

ForwardVars forward_completion(ad::Tape& tape, const ModelBinding& model, const Tokens& condition,
                               const Tokens& prompt, const Tokens& completion) {
    const ArchConfig& a = model.params->arch;
    const PackedInput in = pack_input(a, condition, prompt, completion);
    for (Token t : completion) {
        if (t < 0 || t >= a.vocab) throw Error(ErrorKind::dimension, "completion token out of range");
    }
    const int n = static_cast<int>(in.tokens.size());
    std::vector<Token> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

    ad::Var x = ad::add(tape, ad::embedding(tape, model[kTokEmb], in.tokens), ad::embedding(tape, model[kPosEmb], positions));
    for (int l = 0; l < a.layers; ++l) {
        ad::Var h = ad::rmsnorm(tape, x, model[layer_slot(l, kLn1)]);
        ad::Var qkv = ad::matmul(tape, h, model[layer_slot(l, kQkv)]);
        ad::Var att = ad::matmul(tape, ad::causal_attention(tape, qkv, a.heads), model[layer_slot(l, kAttnOut)]);
        x = ad::add(tape, x, att);
        h = ad::rmsnorm(tape, x, model[layer_slot(l, kLn2)]);
        ad::Var f = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, h, model[layer_slot(l, kFc)]), model[layer_slot(l, kFcBias)]));
        f = ad::add_row(tape, ad::matmul(tape, f, model[layer_slot(l, kProj)]), model[layer_slot(l, kProjBias)]);
        x = ad::add(tape, x, f);
    }
    const int T = static_cast<int>(completion.size());
    ad::Var sel = ad::slice_rows(tape, x, in.first_row, T);
    ad::Var hidden = ad::rmsnorm(tape, sel, model[final_norm_slot(a)]);
    ad::Var logprobs = ad::log_softmax_rows(tape, ad::matmul(tape, hidden, model[head_slot(a)]));
    return {logprobs, hidden};
}

ForcedPass forced_pass(const PolicyParameters& params, const Tokens& condition, const Tokens& prompt,
                       const Tokens& completion) {
    ad::Tape tape;
    const ModelBinding m = bind(tape, params, false);
    const ForwardVars f = forward_completion(tape, m, condition, prompt, completion);
    ForcedPass out;
    out.logprobs = tape.value(f.logprobs);
    out.hidden = tape.value(f.hidden);
    out.token_logprobs.resize(completion.size());
    for (std::size_t t = 0; t < completion.size(); ++t) out.token_logprobs[t] = out.logprobs(static_cast<int>(t), completion[t]);
    return out;
}

std::vector<double> score_tokens(const PolicyParameters& params, const Tokens& condition, const Trajectory& trajectory) {
    return forced_pass(params, condition, trajectory.prompt, trajectory.completion).token_logprobs;
}

FeatureTrace extract_features(const PolicyParameters& params, const Tokens& condition, const Trajectory& trajectory) {
    return FeatureTrace{forced_pass(params, condition, trajectory.prompt, trajectory.completion).hidden};
}

PolicyParameters ema_update(const PolicyParameters& teacher, const PolicyParameters& student, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw parameter_error("EMA beta must lie in [0, 1]");
    if (teacher.shape_table != student.shape_table || teacher.values.size() != student.values.size()) {
        throw parameter_error("EMA teacher and student have different shape tables");
    }
    if (beta == 0.0) return student;
    // incremental form: a teacher equal to the student stays bit-identical
    PolicyParameters out = teacher;
    const double a = 1.0 - beta;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += a * (student.values[i] - teacher.values[i]);
    return out;
}

LossGrad grad_loss(const PolicyParameters& params, const LossClosure& loss) {
    ad::Tape tape(params.values.size());
    const ModelBinding m = bind(tape, params, true);
    const ad::Var root = loss(tape, m);
    if (tape.value(root).size() != 1) throw Error(ErrorKind::dimension, "loss closure must return a scalar");
    LossGrad out;
    out.loss = tape.scalar(root);
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss " + std::to_string(out.loss));
    tape.backward(root);
    out.grad = tape.param_grad();
    for (double g : out.grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient");
    }
    return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'U', 'N', 'I', 'S', 'D', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(U) > in.size()) throw Error(ErrorKind::io, "truncated checkpoint");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
}

}  // namespace

std::string checkpoint_bytes(const PolicyParameters& params) {
    nlohmann::ordered_json h;
    h["arch"] = {{"vocab", params.arch.vocab},     {"d_model", params.arch.d_model}, {"layers", params.arch.layers},
                 {"heads", params.arch.heads},     {"window", params.arch.window},   {"mlp_ratio", params.arch.mlp_ratio},
                 {"init_std", params.arch.init_std}};
    h["dtype"] = to_string(params.dtype);
    h["count"] = params.values.size();
    auto table = nlohmann::ordered_json::array();
    for (const auto& s : params.shape_table) {
        table.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
    }
    h["shape_table"] = table;
    const std::string header = h.dump();

    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, header.size());
    out += header;
    for (double v : params.values) {
        if (params.dtype == DType::f64) {
            put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        } else {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    return out;
}

PolicyParameters parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw Error(ErrorKind::io, "not a checkpoint (bad magic)");
    }
    std::size_t pos = sizeof kMagic;
    if (get_le<std::uint32_t>(bytes, pos) != kCheckpointVersion) throw Error(ErrorKind::io, "unsupported checkpoint version");
    const auto hlen = get_le<std::uint64_t>(bytes, pos);
    if (pos + hlen > bytes.size()) throw Error(ErrorKind::io, "truncated checkpoint header");
    PolicyParameters p;
    try {
        const auto h = nlohmann::json::parse(bytes.substr(pos, hlen));
        const auto& a = h.at("arch");
        p.arch.vocab = a.at("vocab");
        p.arch.d_model = a.at("d_model");
        p.arch.layers = a.at("layers");
        p.arch.heads = a.at("heads");
        p.arch.window = a.at("window");
        p.arch.mlp_ratio = a.at("mlp_ratio");
        p.arch.init_std = a.at("init_std");
        p.dtype = parse_dtype(h.at("dtype").get<std::string>());
        for (const auto& s : h.at("shape_table")) {
            p.shape_table.push_back(ParamSlice{s.at("name"), s.at("offset"), s.at("rows"), s.at("cols")});
        }
        p.values.resize(h.at("count").get<std::size_t>());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::io, std::string("bad checkpoint header: ") + e.what());
    }
    pos += hlen;
    for (double& v : p.values) {
        if (p.dtype == DType::f64) {
            v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
        } else {
            v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos)));
        }
    }
    if (pos != bytes.size()) throw Error(ErrorKind::io, "trailing bytes after checkpoint payload");
    if (p.shape_table != layout(p.arch)) throw Error(ErrorKind::io, "checkpoint shape table does not match its architecture");
    check_invariants(p);
    return p;
}

void save_checkpoint(const std::string& path, const PolicyParameters& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorKind::io, "cannot open " + path + " for writing");
    const std::string b = checkpoint_bytes(params);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!os) throw Error(ErrorKind::io, "failed writing " + path);
}

PolicyParameters load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::io, "cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace unisd
