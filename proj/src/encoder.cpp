#include "dyncls/encoder.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace dyncls {

Vocabulary Vocabulary::from_tokens(std::vector<std::string> toks) {
    Vocabulary v;
    v.tokens = std::move(toks);
    v.tokens.push_back(kUnkToken);
    v.index.reserve(v.tokens.size());
    for (size_t i = 0; i < v.tokens.size(); ++i) {
        if (!v.index.emplace(v.tokens[i], static_cast<int>(i)).second)
            throw UsageError("Vocabulary: duplicate token '" + v.tokens[i] + "'");
    }
    v.unk_index = static_cast<int>(v.tokens.size()) - 1;
    return v;
}

uint64_t Vocabulary::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : tokens) {
        h = fnv1a64(t, h);
        h = fnv1a64("\x1f", h);
    }
    return h;
}

size_t EncoderParams::trainable_count() const {
    size_t n = embedding.trainable ? embedding.data.size() : 0;
    for (const auto& l : layers)
        n += l.W.size() + l.b.size();
    return n;
}

uint64_t EncoderParams::content_hash() const {
    uint64_t h = fnv1a64(embedding.data.data(), embedding.data.size() * sizeof(double));
    for (const auto& l : layers) {
        h = fnv1a64(l.W.data(), l.W.size() * sizeof(double), h);
        h = fnv1a64(l.b.data(), l.b.size() * sizeof(double), h);
    }
    return h;
}

ParamGradients ParamGradients::zeros_like(const EncoderParams& p) {
    ParamGradients g;
    if (p.embedding.trainable)
        g.embedding.assign(p.embedding.data.size(), 0.0);
    g.W.reserve(p.layers.size());
    g.b.reserve(p.layers.size());
    for (const auto& l : p.layers) {
        g.W.emplace_back(l.W.size(), 0.0);
        g.b.emplace_back(l.b.size(), 0.0);
    }
    return g;
}

void ParamGradients::reset() {
    std::fill(embedding.begin(), embedding.end(), 0.0);
    for (auto& w : W)
        std::fill(w.begin(), w.end(), 0.0);
    for (auto& v : b)
        std::fill(v.begin(), v.end(), 0.0);
}

Vec encode(const EncoderParams& params, const std::vector<int>& tokens, Mode mode, Rng& rng,
           ForwardTrace* trace) {
    static const std::vector<int> kEmpty{};
    const std::vector<int>* toks = &tokens;
    std::vector<int> unk_singleton;
    if (tokens.empty()) {
        unk_singleton.push_back(params.vocab.unk_index);
        toks = &unk_singleton;
    }
    const int dw = params.embedding.cols;
    Vec pooled(dw, 0.0);
    for (int t : *toks) {
        if (t < 0 || t >= params.embedding.rows)
            throw UsageError("encode: token index " + std::to_string(t) + " out of range");
        const double* row = params.embedding.row(t);
        for (int j = 0; j < dw; ++j)
            pooled[j] += row[j];
    }
    double inv = 1.0 / static_cast<double>(toks->size());
    for (double& x : pooled)
        x *= inv;

    bool use_dropout = mode == Mode::train && params.dropout_rate > 0.0;
    if (trace) {
        trace->tokens = *toks;
        trace->pooled = pooled;
        trace->hidden_tanh.clear();
        trace->hidden_out.clear();
        trace->masks.clear();
        trace->params_version = params.version;
        trace->valid = mode == Mode::train;
    }

    Vec h = std::move(pooled);
    const size_t L = params.layers.size();
    for (size_t l = 0; l < L; ++l) {
        const AffineLayer& lay = params.layers[l];
        Vec z(lay.out);
        for (int i = 0; i < lay.out; ++i) {
            const double* wrow = lay.W.data() + static_cast<size_t>(i) * lay.in;
            double s = lay.b[i];
            for (int j = 0; j < lay.in; ++j)
                s += wrow[j] * h[j];
            z[i] = s;
        }
        if (l + 1 == L) {
            h = std::move(z);
            break;
        }
        for (double& x : z)
            x = std::tanh(x);
        if (trace)
            trace->hidden_tanh.push_back(z);
        if (use_dropout) {
            Vec mask(z.size());
            double keep = 1.0 - params.dropout_rate;
            for (size_t i = 0; i < z.size(); ++i) {
                mask[i] = rng.next_double() < params.dropout_rate ? 0.0 : 1.0 / keep;
                z[i] *= mask[i];
            }
            if (trace)
                trace->masks.push_back(std::move(mask));
        }
        if (trace)
            trace->hidden_out.push_back(z);
        h = std::move(z);
    }
    return h;
}

void backward_into(const EncoderParams& params, const ForwardTrace& trace, const Vec& output_grad,
                   ParamGradients& acc) {
    if (!trace.valid)
        throw UsageError("backward: trace was not produced by a train-mode forward");
    if (trace.params_version != params.version)
        throw UsageError("backward: stale trace (parameters changed since the forward pass)");
    const size_t L = params.layers.size();
    Vec delta = output_grad;
    for (size_t li = L; li-- > 0;) {
        const AffineLayer& lay = params.layers[li];
        const Vec& input = li == 0 ? trace.pooled : trace.hidden_out[li - 1];
        Vec& gw = acc.W[li];
        Vec& gb = acc.b[li];
        for (int i = 0; i < lay.out; ++i) {
            double d = delta[i];
            double* grow = gw.data() + static_cast<size_t>(i) * lay.in;
            for (int j = 0; j < lay.in; ++j)
                grow[j] += d * input[j];
            gb[i] += d;
        }
        if (li == 0)
            break;
        Vec prev(lay.in, 0.0);
        for (int i = 0; i < lay.out; ++i) {
            const double* wrow = lay.W.data() + static_cast<size_t>(i) * lay.in;
            double d = delta[i];
            for (int j = 0; j < lay.in; ++j)
                prev[j] += wrow[j] * d;
        }
        const Vec& tanh_a = trace.hidden_tanh[li - 1];
        if (!trace.masks.empty()) {
            const Vec& mask = trace.masks[li - 1];
            for (size_t j = 0; j < prev.size(); ++j)
                prev[j] *= mask[j];
        }
        for (size_t j = 0; j < prev.size(); ++j)
            prev[j] *= 1.0 - tanh_a[j] * tanh_a[j];
        delta = std::move(prev);
    }
    if (params.embedding.trainable) {
        // delta currently sits at layer 0's output; push it through W0 to the
        // pooled input, then spread over the contributing rows
        const AffineLayer& l0 = params.layers[0];
        Vec ed(l0.in, 0.0);
        for (int i = 0; i < l0.out; ++i) {
            const double* wrow = l0.W.data() + static_cast<size_t>(i) * l0.in;
            double d = delta[i];
            for (int j = 0; j < l0.in; ++j)
                ed[j] += wrow[j] * d;
        }
        const int dw = params.embedding.cols;
        double inv = 1.0 / static_cast<double>(trace.tokens.size());
        for (int t : trace.tokens) {
            double* grow = acc.embedding.data() + static_cast<size_t>(t) * dw;
            for (int j = 0; j < dw; ++j)
                grow[j] += ed[j] * inv;
        }
    }
}

ParamGradients backward(const EncoderParams& params, const ForwardTrace& trace,
                        const Vec& output_grad) {
    ParamGradients g = ParamGradients::zeros_like(params);
    backward_into(params, trace, output_grad, g);
    return g;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_tensor(Vec& w, const Vec& g, Vec& m, Vec& v, double lr, double c1, double c2) {
    for (size_t i = 0; i < w.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
        double mhat = m[i] / c1;
        double vhat = v[i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
}

} // namespace

void adam_step(EncoderParams& params, const ParamGradients& grads, double lr) {
    params.adam_steps += 1;
    params.version += 1;
    double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(params.adam_steps));
    double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(params.adam_steps));
    if (params.embedding.trainable) {
        if (grads.embedding.size() != params.embedding.data.size())
            throw UsageError("adam_step: embedding gradient shape mismatch");
        adam_tensor(params.embedding.data, grads.embedding, params.m_embedding,
                    params.v_embedding, lr, c1, c2);
    }
    for (size_t l = 0; l < params.layers.size(); ++l) {
        if (grads.W[l].size() != params.layers[l].W.size())
            throw UsageError("adam_step: layer gradient shape mismatch");
        adam_tensor(params.layers[l].W, grads.W[l], params.m_W[l], params.v_W[l], lr, c1, c2);
        adam_tensor(params.layers[l].b, grads.b[l], params.m_b[l], params.v_b[l], lr, c1, c2);
    }
}

EncoderParams init_encoder(Vocabulary vocab, const EncoderInit& cfg, Rng& rng) {
    if (cfg.embed_dim < 1 || cfg.output_dim < 1)
        throw UsageError("init_encoder: dimensions must be positive");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw UsageError("init_encoder: dropout rate must lie in [0,1)");
    EncoderParams p;
    p.vocab = std::move(vocab);
    p.dropout_rate = cfg.dropout;
    p.embedding.rows = p.vocab.size();
    p.embedding.cols = cfg.embed_dim;
    p.embedding.data.assign(static_cast<size_t>(p.embedding.rows) * cfg.embed_dim, 0.0);

    if (cfg.embedding_file) {
        PretrainedEmbeddings pre = load_embedding_file(*cfg.embedding_file);
        if (pre.dim != cfg.embed_dim)
            throw DataError("init_encoder: embedding file dimension " + std::to_string(pre.dim) +
                            " does not match configured embed_dim " +
                            std::to_string(cfg.embed_dim));
        std::unordered_map<std::string, int> file_index;
        for (size_t i = 0; i < pre.tokens.size(); ++i)
            file_index.emplace(pre.tokens[i], static_cast<int>(i));
        for (int r = 0; r < p.embedding.rows; ++r) {
            auto it = file_index.find(p.vocab.tokens[r]);
            if (it == file_index.end())
                continue; // unknown tokens keep the zero vector
            const Vec& src = pre.vectors[it->second];
            std::copy(src.begin(), src.end(), p.embedding.row(r));
        }
        p.embedding.trainable = false;
    } else {
        for (double& x : p.embedding.data)
            x = rng.uniform(-0.1, 0.1);
        p.embedding.trainable = true;
    }

    std::vector<int> dims;
    dims.push_back(cfg.embed_dim);
    for (int h : cfg.hidden)
        dims.push_back(h);
    dims.push_back(cfg.output_dim);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        AffineLayer lay;
        lay.in = dims[l];
        lay.out = dims[l + 1];
        lay.W.resize(static_cast<size_t>(lay.in) * lay.out);
        lay.b.assign(lay.out, 0.0);
        double bound = std::sqrt(6.0 / (lay.in + lay.out));
        for (double& w : lay.W)
            w = rng.uniform(-bound, bound);
        p.layers.push_back(std::move(lay));
    }

    if (p.embedding.trainable) {
        p.m_embedding.assign(p.embedding.data.size(), 0.0);
        p.v_embedding.assign(p.embedding.data.size(), 0.0);
    }
    for (const auto& l : p.layers) {
        p.m_W.emplace_back(l.W.size(), 0.0);
        p.v_W.emplace_back(l.W.size(), 0.0);
        p.m_b.emplace_back(l.b.size(), 0.0);
        p.v_b.emplace_back(l.b.size(), 0.0);
    }
    return p;
}

PretrainedEmbeddings load_embedding_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open embedding file: " + path);
    PretrainedEmbeddings out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        Vec v;
        double x;
        while (ss >> x)
            v.push_back(x);
        if (!ss.eof())
            throw DataError("embedding file " + path + ": line " + std::to_string(lineno) +
                            ": non-numeric vector entry");
        if (out.dim == 0)
            out.dim = static_cast<int>(v.size());
        if (v.empty() || static_cast<int>(v.size()) != out.dim)
            throw DataError("embedding file " + path + ": line " + std::to_string(lineno) +
                            ": expected " + std::to_string(out.dim) + " values, got " +
                            std::to_string(v.size()));
        out.tokens.push_back(std::move(tok));
        out.vectors.push_back(std::move(v));
    }
    return out;
}

} // namespace dyncls
