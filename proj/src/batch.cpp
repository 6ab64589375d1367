#include "dyncls/batch.hpp"

#include <omp.h>

#include <cmath>

namespace dyncls {

int max_threads() {
    return omp_get_max_threads();
}

std::vector<Vec> encode_batch(const EncoderParams& params,
                              const std::vector<const std::vector<int>*>& seqs, Mode mode,
                              const Rng& dropout_root, Exec exec,
                              std::vector<ForwardTrace>* traces) {
    const int n = static_cast<int>(seqs.size());
    std::vector<Vec> out(n);
    if (traces)
        traces->assign(n, {});
    // worth checking before burning threads: a bad token index should surface
    // as the same UsageError either path takes
    auto one = [&](int i) {
        Rng slot_rng = dropout_root.derive("slot", static_cast<uint64_t>(i));
        out[i] = encode(params, *seqs[i], mode, slot_rng, traces ? &(*traces)[i] : nullptr);
    };
    if (exec == Exec::serial) {
        for (int i = 0; i < n; ++i)
            one(i);
    } else {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i)
            one(i);
    }
    return out;
}

namespace {

// Per-slot backward state: the delta vector entering each affine layer. The
// parallel path recomputes exactly what backward_into computes, then replays
// the accumulations cell-by-cell in slot order.
struct SlotDeltas {
    std::vector<Vec> delta; // delta[l] pairs with layer l
    Vec embed_delta;        // delta after layer 0's input (d_w), already /T
};

SlotDeltas slot_deltas(const EncoderParams& params, const ForwardTrace& trace,
                       const Vec& output_grad) {
    if (!trace.valid)
        throw UsageError("backward: trace was not produced by a train-mode forward");
    if (trace.params_version != params.version)
        throw UsageError("backward: stale trace (parameters changed since the forward pass)");
    const size_t L = params.layers.size();
    SlotDeltas sd;
    sd.delta.resize(L);
    Vec delta = output_grad;
    for (size_t li = L; li-- > 0;) {
        sd.delta[li] = delta;
        if (li == 0)
            break;
        const AffineLayer& lay = params.layers[li];
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
        const AffineLayer& l0 = params.layers[0];
        Vec ed(l0.in, 0.0);
        for (int i = 0; i < l0.out; ++i) {
            const double* wrow = l0.W.data() + static_cast<size_t>(i) * l0.in;
            double d = sd.delta[0][i];
            for (int j = 0; j < l0.in; ++j)
                ed[j] += wrow[j] * d;
        }
        // NOTE: backward_into computes row += delta[j] * inv per token; we
        // keep delta and inv separate so the products match bitwise.
        sd.embed_delta = std::move(ed);
    }
    return sd;
}

} // namespace

void backward_batch(const EncoderParams& params, const std::vector<ForwardTrace>& traces,
                    const std::vector<Vec>& output_grads, Exec exec, ParamGradients& acc) {
    const int n = static_cast<int>(traces.size());
    if (output_grads.size() != traces.size())
        throw UsageError("backward_batch: trace/gradient count mismatch");
    if (exec == Exec::serial) {
        for (int s = 0; s < n; ++s)
            backward_into(params, traces[s], output_grads[s], acc);
        return;
    }

    std::vector<SlotDeltas> sd(n);
#pragma omp parallel for schedule(static)
    for (int s = 0; s < n; ++s)
        sd[s] = slot_deltas(params, traces[s], output_grads[s]);

    const size_t L = params.layers.size();
    for (size_t li = 0; li < L; ++li) {
        const AffineLayer& lay = params.layers[li];
        Vec& gw = acc.W[li];
        Vec& gb = acc.b[li];
#pragma omp parallel for schedule(static)
        for (int i = 0; i < lay.out; ++i) {
            double* grow = gw.data() + static_cast<size_t>(i) * lay.in;
            for (int s = 0; s < n; ++s) {
                const Vec& input = li == 0 ? traces[s].pooled : traces[s].hidden_out[li - 1];
                double d = sd[s].delta[li][i];
                for (int j = 0; j < lay.in; ++j)
                    grow[j] += d * input[j];
            }
        }
#pragma omp parallel for schedule(static)
        for (int i = 0; i < lay.out; ++i)
            for (int s = 0; s < n; ++s)
                gb[i] += sd[s].delta[li][i];
    }
    if (params.embedding.trainable) {
        const int dw = params.embedding.cols;
        for (int s = 0; s < n; ++s) { // sparse scatter; cheap, kept in slot order
            double inv = 1.0 / static_cast<double>(traces[s].tokens.size());
            for (int t : traces[s].tokens) {
                double* grow = acc.embedding.data() + static_cast<size_t>(t) * dw;
                const Vec& ed = sd[s].embed_delta;
                for (int j = 0; j < dw; ++j)
                    grow[j] += ed[j] * inv;
            }
        }
    }
}

PrototypeSet compute_prototypes(const std::vector<int>& label_ids,
                                const std::vector<std::vector<Vec>>& class_embeddings,
                                Metric metric, const MeanSolverConfig& mean_cfg, Exec exec) {
    if (label_ids.size() != class_embeddings.size())
        throw UsageError("compute_prototypes: label/embedding count mismatch");
    const int n = static_cast<int>(label_ids.size());
    for (int c = 0; c < n; ++c)
        if (class_embeddings[c].empty())
            throw UsageError("compute_prototypes: empty support set for label id " +
                             std::to_string(label_ids[c]));

    PrototypeSet ps;
    ps.metric = metric;
    // sorted by label id so nearest-prototype ties resolve to the smallest id
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i)
        order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return label_ids[a] < label_ids[b]; });
    ps.label_ids.resize(n);
    ps.prototypes.resize(n);
    for (int i = 0; i < n; ++i)
        ps.label_ids[i] = label_ids[order[i]];

    auto one = [&](int i) {
        const auto& embs = class_embeddings[order[i]];
        if (metric == Metric::euclidean) {
            ps.prototypes[i] = euclidean_mean(embs);
        } else {
            std::vector<HyperboloidPoint> lifted;
            lifted.reserve(embs.size());
            for (const auto& e : embs)
                lifted.push_back(lift(e));
            ps.prototypes[i] = frechet_mean(lifted, mean_cfg).point.coords();
        }
    };
    if (exec == Exec::serial || n == 1) {
        for (int i = 0; i < n; ++i)
            one(i);
    } else {
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < n; ++i)
            one(i);
    }
    return ps;
}

std::vector<Vec> sqdist_matrix(const PrototypeSet& protos, const std::vector<Vec>& queries,
                               Exec exec) {
    const int nq = static_cast<int>(queries.size());
    const int np = protos.size();
    std::vector<Vec> out(nq, Vec(np, 0.0));
    auto one = [&](int qi) {
        const Vec& q = queries[qi];
        if (protos.metric == Metric::euclidean) {
            for (int p = 0; p < np; ++p) {
                const Vec& c = protos.prototypes[p];
                double s = 0.0;
                for (size_t j = 0; j < q.size(); ++j) {
                    double d = q[j] - c[j];
                    s += d * d;
                }
                out[qi][p] = s;
            }
        } else {
            Vec lifted = lift(q).coords();
            for (int p = 0; p < np; ++p)
                out[qi][p] = squared_distance_coords(lifted, protos.prototypes[p]);
        }
    };
    if (exec == Exec::serial) {
        for (int qi = 0; qi < nq; ++qi)
            one(qi);
    } else {
#pragma omp parallel for schedule(static)
        for (int qi = 0; qi < nq; ++qi)
            one(qi);
    }
    return out;
}

} // namespace dyncls
