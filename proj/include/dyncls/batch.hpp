#pragma once

#include <cstdint>
#include <vector>

#include "dyncls/encoder.hpp"
#include "dyncls/means.hpp"

namespace dyncls {

// Data-parallel kernels with a serial reference path. Every kernel is
// bit-identical across the two paths and across thread counts: independent
// outputs go to per-slot storage, and shared reductions are ordered by slot
// index (each accumulator cell sees the same additions in the same order the
// serial loop performs them).

enum class Exec { serial, parallel };

enum class Metric { euclidean, hyperbolic };

// Encodes seqs[i] into out[i]. Dropout randomness for slot i comes from
// dropout_root.derive("slot", i), so results do not depend on scheduling.
std::vector<Vec> encode_batch(const EncoderParams& params,
                              const std::vector<const std::vector<int>*>& seqs, Mode mode,
                              const Rng& dropout_root, Exec exec,
                              std::vector<ForwardTrace>* traces = nullptr);

// Accumulates gradients for all (trace, output gradient) pairs into acc,
// exactly as the serial slot-by-slot loop would.
void backward_batch(const EncoderParams& params, const std::vector<ForwardTrace>& traces,
                    const std::vector<Vec>& output_grads, Exec exec, ParamGradients& acc);

struct PrototypeSet {
    Metric metric = Metric::euclidean;
    // label_ids sorted ascending; prototypes[i] has d entries (euclidean) or
    // d+1 ambient entries (hyperbolic)
    std::vector<int> label_ids;
    std::vector<Vec> prototypes;

    int size() const { return static_cast<int>(label_ids.size()); }
};

// One mean per class: the embedded support mean (euclidean) or the Frechet
// mean of the lifted supports initialized at their pseudo-mean (hyperbolic).
PrototypeSet compute_prototypes(const std::vector<int>& label_ids,
                                const std::vector<std::vector<Vec>>& class_embeddings,
                                Metric metric, const MeanSolverConfig& mean_cfg, Exec exec);

// Squared distances from each query embedding (pre-lift, d entries) to every
// prototype; row i belongs to query i.
std::vector<Vec> sqdist_matrix(const PrototypeSet& protos, const std::vector<Vec>& queries,
                               Exec exec);

int max_threads();

} // namespace dyncls
