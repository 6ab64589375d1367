#include "dyncls/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace dyncls {

using json = nlohmann::json;

Episode sample_episode(const TokenizedCorpus& corpus, const EpisodeConfig& cfg, Rng& rng) {
    if (cfg.n_support < 1 || cfg.n_query < 1)
        throw UsageError("sample_episode: n_support and n_query must be >= 1");
    const int need = cfg.n_support + 1;
    std::vector<int> eligible;
    std::vector<std::string> deficient;
    for (int l = 0; l < corpus.n_labels(); ++l) {
        if (static_cast<int>(corpus.train_by_label[l].size()) >= need)
            eligible.push_back(l);
        else
            deficient.push_back(corpus.labels[l]);
    }
    int n_classes = cfg.n_classes > 0 ? cfg.n_classes : corpus.n_labels();
    if (static_cast<int>(eligible.size()) < n_classes) {
        std::string msg = "sample_episode: need " + std::to_string(n_classes) +
                          " labels with >= " + std::to_string(need) + " train examples, have " +
                          std::to_string(eligible.size()) + "; deficient:";
        for (const auto& d : deficient)
            msg += " " + d;
        throw UsageError(msg);
    }

    rng.partial_shuffle(eligible, static_cast<size_t>(n_classes));
    Episode ep;
    ep.class_ids.assign(eligible.begin(), eligible.begin() + n_classes);
    ep.support.resize(n_classes);
    ep.query.resize(n_classes);
    for (int c = 0; c < n_classes; ++c) {
        std::vector<int> docs = corpus.train_by_label[ep.class_ids[c]];
        rng.partial_shuffle(docs, static_cast<size_t>(cfg.n_support));
        ep.support[c].assign(docs.begin(), docs.begin() + cfg.n_support);
        std::vector<int> rest(docs.begin() + cfg.n_support, docs.end());
        if (static_cast<int>(rest.size()) >= cfg.n_query) {
            rng.partial_shuffle(rest, static_cast<size_t>(cfg.n_query));
            ep.query[c].assign(rest.begin(), rest.begin() + cfg.n_query);
        } else {
            // small class: queries drawn with replacement from the non-support
            // remainder, keeping support/query disjoint
            ep.query[c].reserve(cfg.n_query);
            for (int i = 0; i < cfg.n_query; ++i)
                ep.query[c].push_back(rest[rng.below(rest.size())]);
        }
    }
    return ep;
}

EpisodeLoss episode_loss(const PrototypeSet& protos, const std::vector<Vec>& query_embeddings,
                         const std::vector<int>& query_labels, Exec exec) {
    const int n = static_cast<int>(query_embeddings.size());
    const int nc = protos.size();
    if (query_labels.size() != query_embeddings.size())
        throw UsageError("episode_loss: label/embedding count mismatch");
    auto position_of = [&](int label_id) {
        auto it = std::lower_bound(protos.label_ids.begin(), protos.label_ids.end(), label_id);
        if (it == protos.label_ids.end() || *it != label_id)
            throw UsageError("episode_loss: no prototype for label id " + std::to_string(label_id));
        return static_cast<int>(it - protos.label_ids.begin());
    };

    std::vector<Vec> dists = sqdist_matrix(protos, query_embeddings, exec);

    EpisodeLoss out;
    out.query_grads.assign(n, {});
    std::vector<double> losses(n, 0.0);
    std::vector<Vec> coeffs(n, Vec(nc, 0.0)); // dL/dD per query, scaled by 1/n

    const double inv_n = 1.0 / std::max(1, n);
    auto one = [&](int qi) {
        const Vec& d = dists[qi];
        int truth = position_of(query_labels[qi]);
        // softmax over -d with max subtraction
        double m = -d[0];
        for (int k = 1; k < nc; ++k)
            m = std::max(m, -d[k]);
        double z = 0.0;
        for (int k = 0; k < nc; ++k)
            z += std::exp(-d[k] - m);
        double lse = m + std::log(z);
        losses[qi] = lse + d[truth];
        for (int k = 0; k < nc; ++k) {
            double sigma = std::exp(-d[k] - m) / z;
            coeffs[qi][k] = inv_n * ((k == truth ? 1.0 : 0.0) - sigma);
        }
        // gradient wrt the query embedding
        const Vec& q = query_embeddings[qi];
        Vec grad(q.size(), 0.0);
        if (protos.metric == Metric::euclidean) {
            for (int k = 0; k < nc; ++k) {
                double c = 2.0 * coeffs[qi][k];
                const Vec& p = protos.prototypes[k];
                for (size_t j = 0; j < q.size(); ++j)
                    grad[j] += c * (q[j] - p[j]);
            }
        } else {
            HyperboloidPoint lifted = lift(q);
            Vec ambient(q.size() + 1, 0.0);
            for (int k = 0; k < nc; ++k) {
                Vec g = squared_distance_gradient(
                    lifted, HyperboloidPoint::unchecked(Vec(protos.prototypes[k])));
                double c = coeffs[qi][k];
                for (size_t j = 0; j < ambient.size(); ++j)
                    ambient[j] += c * g[j];
            }
            // chain through the lift: x0 = sqrt(|q|^2+1), dx0/dq_j = q_j/x0
            double x0 = lifted.coords()[0];
            for (size_t j = 0; j < q.size(); ++j)
                grad[j] = ambient[0] * (q[j] / x0) + ambient[j + 1];
        }
        out.query_grads[qi] = std::move(grad);
    };
    if (exec == Exec::serial) {
        for (int qi = 0; qi < n; ++qi)
            one(qi);
    } else {
#pragma omp parallel for schedule(static)
        for (int qi = 0; qi < n; ++qi)
            one(qi);
    }

    double total = 0.0;
    for (int qi = 0; qi < n; ++qi) // fixed order
        total += losses[qi];
    out.loss = total * inv_n;

    if (protos.metric == Metric::euclidean) {
        out.prototype_grads.assign(nc, Vec(query_embeddings.empty() ? 0 : query_embeddings[0].size(), 0.0));
        for (int qi = 0; qi < n; ++qi) {
            const Vec& q = query_embeddings[qi];
            for (int k = 0; k < nc; ++k) {
                double c = -2.0 * coeffs[qi][k];
                Vec& pg = out.prototype_grads[k];
                const Vec& p = protos.prototypes[k];
                for (size_t j = 0; j < q.size(); ++j)
                    pg[j] += c * (q[j] - p[j]);
            }
        }
    }
    return out;
}

std::string history_to_string(const TrainHistory& history) {
    std::string out;
    for (const auto& e : history.entries) {
        json j;
        j["episode"] = e.episode;
        j["loss"] = e.loss;
        if (e.val_accuracy)
            j["val_accuracy"] = *e.val_accuracy;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void write_history(const TrainHistory& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write history file: " + path);
    out << history_to_string(history);
}

namespace {

MeanSolverConfig mean_config(int iters) {
    MeanSolverConfig cfg;
    cfg.max_iterations = iters;
    cfg.grad_tolerance = iters >= 100 ? 1e-9 : 1e-6;
    return cfg;
}

std::string episode_diagnostic(const Episode& ep, const TokenizedCorpus& corpus) {
    std::string s = "classes:";
    for (int c : ep.class_ids)
        s += " " + corpus.labels[c];
    return s;
}

} // namespace

TrainHistory train_episodic(EncoderParams& params, const TokenizedCorpus& corpus,
                            const EpisodeConfig& cfg, const TrainConfig& tcfg, const Rng& rng) {
    TrainHistory history;
    auto criterion = tcfg.early.criterion;
    if (criterion == EarlyStopConfig::Criterion::validation_accuracy &&
        corpus.validation_docs.empty())
        criterion = EarlyStopConfig::Criterion::train_loss;

    EncoderParams best = params;
    double best_metric = criterion == EarlyStopConfig::Criterion::train_loss
                             ? std::numeric_limits<double>::infinity()
                             : -1.0;
    int evals_since_best = 0;
    bool stopped = false;
    double window_loss = 0.0;
    int window_count = 0;

    ParamGradients acc = ParamGradients::zeros_like(params);
    for (int e = 1; e <= tcfg.episodes && !stopped; ++e) {
        Rng ep_rng = rng.derive("episode", static_cast<uint64_t>(e));
        Episode ep = sample_episode(corpus, cfg, ep_rng);
        const int nc = static_cast<int>(ep.class_ids.size());

        // slot order: supports class-major, then queries class-major
        std::vector<const std::vector<int>*> seqs;
        for (int c = 0; c < nc; ++c)
            for (int doc : ep.support[c])
                seqs.push_back(&corpus.tokens[doc]);
        const int query_base = static_cast<int>(seqs.size());
        std::vector<int> query_labels;
        for (int c = 0; c < nc; ++c)
            for (int doc : ep.query[c]) {
                seqs.push_back(&corpus.tokens[doc]);
                query_labels.push_back(ep.class_ids[c]);
            }

        Rng drop_rng = rng.derive("dropout", static_cast<uint64_t>(e));
        std::vector<ForwardTrace> traces;
        std::vector<Vec> embs = encode_batch(params, seqs, Mode::train, drop_rng, tcfg.exec, &traces);

        std::vector<std::vector<Vec>> class_supports(nc);
        for (int c = 0; c < nc; ++c) {
            auto& dst = class_supports[c];
            int base = c * cfg.n_support;
            for (int j = 0; j < cfg.n_support; ++j)
                dst.push_back(embs[base + j]);
        }
        PrototypeSet protos = compute_prototypes(ep.class_ids, class_supports, cfg.metric,
                                                 mean_config(cfg.train_mean_iters), tcfg.exec);

        std::vector<Vec> queries(embs.begin() + query_base, embs.end());
        EpisodeLoss el = episode_loss(protos, queries, query_labels, tcfg.exec);
        if (!std::isfinite(el.loss))
            throw NumericalError("train_episodic: non-finite loss at episode " +
                                 std::to_string(e) + " (" + episode_diagnostic(ep, corpus) + ")");

        // per-slot output gradients: euclidean prototypes spread their
        // gradient evenly over the supports; hyperbolic supports stay
        // detached (zero gradient)
        std::vector<Vec> slot_grads(seqs.size(), Vec(params.output_dim(), 0.0));
        if (cfg.metric == Metric::euclidean) {
            for (int c = 0; c < nc; ++c) {
                auto it = std::lower_bound(protos.label_ids.begin(), protos.label_ids.end(),
                                           ep.class_ids[c]);
                int k = static_cast<int>(it - protos.label_ids.begin());
                int base = c * cfg.n_support;
                for (int j = 0; j < cfg.n_support; ++j) {
                    Vec& g = slot_grads[base + j];
                    for (size_t x = 0; x < g.size(); ++x)
                        g[x] = el.prototype_grads[k][x] / static_cast<double>(cfg.n_support);
                }
            }
        }
        for (size_t qi = 0; qi < queries.size(); ++qi)
            slot_grads[query_base + qi] = el.query_grads[qi];
        acc.reset();
        backward_batch(params, traces, slot_grads, tcfg.exec, acc);
        adam_step(params, acc, tcfg.lr);

        HistoryEntry entry{e, el.loss, std::nullopt};
        window_loss += el.loss;
        window_count += 1;

        if (criterion != EarlyStopConfig::Criterion::none && e % tcfg.early.eval_interval == 0) {
            double metric;
            bool improved;
            if (criterion == EarlyStopConfig::Criterion::validation_accuracy) {
                PrototypeSet eval_protos = build_final_prototypes(
                    params, corpus, cfg.metric, cfg.eval_mean_iters, tcfg.exec);
                metric = prototype_accuracy(params, eval_protos, corpus, corpus.validation_docs,
                                            tcfg.exec);
                entry.val_accuracy = metric;
                improved = metric > best_metric;
            } else {
                metric = window_loss / std::max(1, window_count);
                improved = metric < best_metric;
            }
            window_loss = 0.0;
            window_count = 0;
            if (improved) {
                best_metric = metric;
                best = params;
                history.best_episode = e;
                evals_since_best = 0;
            } else if (++evals_since_best >= tcfg.early.patience) {
                stopped = true;
            }
        }
        history.entries.push_back(std::move(entry));
    }
    if (criterion != EarlyStopConfig::Criterion::none && history.best_episode > 0)
        params = std::move(best);
    return history;
}

PrototypeSet build_final_prototypes(const EncoderParams& params, const TokenizedCorpus& corpus,
                                    Metric metric, int eval_mean_iters, Exec exec) {
    std::vector<int> label_ids;
    std::vector<const std::vector<int>*> seqs;
    std::vector<std::pair<int, int>> ranges; // [begin, end) into seqs per label
    for (int l = 0; l < corpus.n_labels(); ++l) {
        const auto& docs = corpus.train_by_label[l];
        if (docs.empty())
            throw UsageError("build_final_prototypes: label '" + corpus.labels[l] +
                             "' has no examples");
        label_ids.push_back(l);
        int begin = static_cast<int>(seqs.size());
        for (int doc : docs)
            seqs.push_back(&corpus.tokens[doc]);
        ranges.emplace_back(begin, static_cast<int>(seqs.size()));
    }
    Rng unused(0); // eval mode consumes no randomness
    std::vector<Vec> embs = encode_batch(params, seqs, Mode::eval, unused, exec);
    std::vector<std::vector<Vec>> class_embs(label_ids.size());
    for (size_t c = 0; c < ranges.size(); ++c)
        class_embs[c].assign(embs.begin() + ranges[c].first, embs.begin() + ranges[c].second);
    return compute_prototypes(label_ids, class_embs, metric, mean_config(eval_mean_iters), exec);
}

Classification classify(const EncoderParams& params, const PrototypeSet& protos,
                        const std::vector<int>& tokens) {
    if (protos.size() == 0)
        throw UsageError("classify: empty prototype set");
    Rng unused(0);
    Vec emb = encode(params, tokens, Mode::eval, unused);
    Vec dists = sqdist_matrix(protos, {emb}, Exec::serial)[0];
    Classification out;
    int best = 0;
    for (int k = 1; k < protos.size(); ++k)
        if (dists[k] < dists[best]) // ties keep the smaller label id
            best = k;
    out.label_id = protos.label_ids[best];
    double m = -dists[0];
    for (int k = 1; k < protos.size(); ++k)
        m = std::max(m, -dists[k]);
    double z = 0.0;
    out.scores.resize(protos.size());
    for (int k = 0; k < protos.size(); ++k) {
        out.scores[k] = std::exp(-dists[k] - m);
        z += out.scores[k];
    }
    for (double& s : out.scores)
        s /= z;
    return out;
}

std::vector<int> classify_batch(const EncoderParams& params, const PrototypeSet& protos,
                                const std::vector<const std::vector<int>*>& seqs, Exec exec) {
    Rng unused(0);
    std::vector<Vec> embs = encode_batch(params, seqs, Mode::eval, unused, exec);
    std::vector<Vec> dists = sqdist_matrix(protos, embs, exec);
    std::vector<int> out(seqs.size());
    for (size_t i = 0; i < seqs.size(); ++i) {
        int best = 0;
        for (int k = 1; k < protos.size(); ++k)
            if (dists[i][k] < dists[i][best])
                best = k;
        out[i] = protos.label_ids[best];
    }
    return out;
}

double prototype_accuracy(const EncoderParams& params, const PrototypeSet& protos,
                          const TokenizedCorpus& corpus, const std::vector<int>& docs, Exec exec) {
    if (docs.empty())
        return 0.0;
    std::vector<const std::vector<int>*> seqs;
    for (int d : docs)
        seqs.push_back(&corpus.tokens[d]);
    std::vector<int> pred = classify_batch(params, protos, seqs, exec);
    long correct = 0;
    for (size_t i = 0; i < docs.size(); ++i)
        correct += pred[i] == corpus.label_ids[docs[i]];
    return static_cast<double>(correct) / static_cast<double>(docs.size());
}

} // namespace dyncls
