#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dyncls/errors.hpp"
#include "dyncls/geometry.hpp"
#include "dyncls/rng.hpp"

namespace dyncls {

// The trainable embedding function: mean-pooled word vectors followed by a
// stack of affine layers with tanh between them (none after the last), with
// inverted dropout on the hidden activations in train mode. Gradients are
// hand-derived; adam_step applies the standard bias-corrected update.

inline constexpr const char* kUnkToken = "<unk>";

struct Vocabulary {
    std::vector<std::string> tokens;              // index -> token, UNK last
    std::unordered_map<std::string, int> index;   // token -> index
    int unk_index = -1;

    int size() const { return static_cast<int>(tokens.size()); }
    int lookup(const std::string& tok) const {
        auto it = index.find(tok);
        return it == index.end() ? unk_index : it->second;
    }
    static Vocabulary from_tokens(std::vector<std::string> toks); // appends UNK
    uint64_t content_hash() const;
};

struct EmbeddingTable {
    int rows = 0, cols = 0;
    bool trainable = true;
    Vec data; // row-major

    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
};

struct AffineLayer {
    int in = 0, out = 0;
    Vec W; // row-major [out][in]
    Vec b;
};

struct EncoderParams {
    Vocabulary vocab;
    EmbeddingTable embedding;
    std::vector<AffineLayer> layers;
    double dropout_rate = 0.5;

    // bumped by every optimizer step; traces remember the version they saw
    uint64_t version = 0;

    // ADAM state, one moment pair per trainable tensor
    uint64_t adam_steps = 0;
    Vec m_embedding, v_embedding;
    std::vector<Vec> m_W, v_W, m_b, v_b;

    int embed_dim() const { return embedding.cols; }
    int output_dim() const { return layers.back().out; }
    size_t trainable_count() const;
    uint64_t content_hash() const; // digest over all parameter bytes
};

struct ParamGradients {
    Vec embedding; // empty when the table is frozen
    std::vector<Vec> W, b;

    static ParamGradients zeros_like(const EncoderParams& p);
    void reset();
};

enum class Mode { train, eval };

struct ForwardTrace {
    std::vector<int> tokens; // after UNK substitution for empty input
    Vec pooled;
    std::vector<Vec> hidden_tanh; // post-tanh, per hidden layer
    std::vector<Vec> hidden_out;  // post-dropout (== hidden_tanh in eval or rate 0)
    std::vector<Vec> masks;       // scaled dropout masks; empty when unused
    uint64_t params_version = 0;
    bool valid = false; // only train-mode forwards produce usable traces
};

struct EncoderInit {
    int embed_dim = 50;
    std::vector<int> hidden = {128};
    int output_dim = 16;
    double dropout = 0.5;
    std::optional<std::string> embedding_file; // frozen pretrained vectors
};

// Forward pass. Empty token sequences are treated as a single UNK. Dropout
// draws come from `rng` (one uniform per hidden unit, train mode with rate > 0
// only); eval mode consumes no randomness.
Vec encode(const EncoderParams& params, const std::vector<int>& tokens, Mode mode, Rng& rng,
           ForwardTrace* trace = nullptr);

// Reverse-mode gradients of <output, output_grad> accumulated into `acc`
// (exactly the per-slot operation the batch kernels reproduce).
void backward_into(const EncoderParams& params, const ForwardTrace& trace, const Vec& output_grad,
                   ParamGradients& acc);

ParamGradients backward(const EncoderParams& params, const ForwardTrace& trace,
                        const Vec& output_grad);

// beta1 = 0.9, beta2 = 0.999, eps = 1e-8; frozen embedding rows receive no
// update at all.
void adam_step(EncoderParams& params, const ParamGradients& grads, double lr);

// Uniform [-0.1, 0.1] embeddings (trainable) unless cfg.embedding_file is
// given, in which case file vectors are loaded frozen; layer weights use
// scaled-uniform init.
EncoderParams init_encoder(Vocabulary vocab, const EncoderInit& cfg, Rng& rng);

struct PretrainedEmbeddings {
    std::vector<std::string> tokens;
    int dim = 0;
    std::vector<Vec> vectors;
};

// One token per line followed by `dim` floats; mismatched arity is a
// line-numbered DataError.
PretrainedEmbeddings load_embedding_file(const std::string& path);

} // namespace dyncls
