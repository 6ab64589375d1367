#include "dyncls/protocol.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace dyncls {

using json = nlohmann::json;

LabelDynamics identity_dynamics(const std::vector<std::string>& labels) {
    LabelDynamics d;
    d.old_labels = labels;
    d.new_labels = labels;
    std::sort(d.old_labels.begin(), d.old_labels.end());
    std::sort(d.new_labels.begin(), d.new_labels.end());
    for (const auto& l : d.new_labels)
        d.relabel[l] = l;
    return d;
}

LabelDynamics collapse_labels(const LabelHierarchy& hierarchy, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw UsageError("collapse_labels: p must lie in [0,1)");
    if (hierarchy.depth() < 2)
        throw UsageError("collapse_labels: hierarchy depth must be >= 2");
    std::vector<std::string> leaves = hierarchy.leaf_labels();
    const int total = static_cast<int>(leaves.size());
    const int target = p > 0.0 ? static_cast<int>(std::ceil(p * total)) : 0;

    // candidate groups: non-root internal nodes with leaf children; a chosen
    // parent absorbs every one of its leaf children
    std::vector<int> candidates;
    for (size_t i = 1; i < hierarchy.nodes.size(); ++i) {
        const auto& n = hierarchy.nodes[i];
        if (n.leaf)
            continue;
        for (int c : n.children)
            if (hierarchy.nodes[c].leaf) {
                candidates.push_back(static_cast<int>(i));
                break;
            }
    }

    LabelDynamics d;
    d.new_labels = leaves;
    std::map<std::string, std::string> collapsed; // leaf -> parent name
    int n_collapsed = 0;
    while (n_collapsed < target) {
        if (candidates.empty())
            throw UsageError("collapse_labels: p = " + std::to_string(p) +
                             " is unreachable with the available sibling groups");
        size_t pick = static_cast<size_t>(rng.below(candidates.size()));
        int node = candidates[pick];
        candidates.erase(candidates.begin() + static_cast<long>(pick));
        const auto& parent = hierarchy.nodes[node];
        for (int c : parent.children) {
            if (!hierarchy.nodes[c].leaf)
                continue;
            collapsed[hierarchy.nodes[c].name] = parent.name;
            ++n_collapsed;
        }
    }

    std::set<std::string> old_set;
    for (const auto& leaf : leaves) {
        auto it = collapsed.find(leaf);
        if (it == collapsed.end()) {
            d.relabel[leaf] = leaf;
            old_set.insert(leaf);
        } else {
            if (std::find(leaves.begin(), leaves.end(), it->second) != leaves.end())
                throw DataError("collapse_labels: parent name '" + it->second +
                                "' collides with a leaf label");
            d.relabel[leaf] = it->second;
            old_set.insert(it->second);
            d.introduced.push_back(leaf);
        }
    }
    d.old_labels.assign(old_set.begin(), old_set.end());
    std::sort(d.introduced.begin(), d.introduced.end());
    return d;
}

LabelDynamics remove_labels(const std::vector<std::string>& labels, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw UsageError("remove_labels: p must lie in [0,1)");
    if (labels.size() < 2)
        throw UsageError("remove_labels: need at least 2 labels");
    std::vector<std::string> sorted = labels;
    std::sort(sorted.begin(), sorted.end());
    const int n = static_cast<int>(sorted.size());
    const int n_removed = p > 0.0 ? static_cast<int>(std::ceil(p * n)) : 0;
    if (n_removed >= n)
        throw UsageError("remove_labels: p = " + std::to_string(p) + " would remove all " +
                         std::to_string(n) + " labels");
    std::vector<std::string> pool = sorted;
    rng.partial_shuffle(pool, static_cast<size_t>(n_removed));
    std::set<std::string> removed(pool.begin(), pool.begin() + n_removed);

    LabelDynamics d;
    d.new_labels = sorted;
    for (const auto& l : sorted) {
        if (removed.count(l)) {
            d.relabel[l] = std::nullopt;
            d.introduced.push_back(l);
        } else {
            d.relabel[l] = l;
            d.old_labels.push_back(l);
        }
    }
    return d;
}

ProtocolSplit split_protocolbase_impl(const Corpus& corpus, const LabelDynamics& dynamics,
                                      Rng& rng) {
    std::vector<int> train_docs;
    for (size_t i = 0; i < corpus.documents.size(); ++i)
        if (corpus.documents[i].partition == Partition::train)
            train_docs.push_back(static_cast<int>(i));
    Rng half_rng = rng.derive("half");
    half_rng.shuffle(train_docs);
    size_t n_pre = (train_docs.size() + 1) / 2;

    ProtocolSplit split;
    auto relabel_of = [&](const std::string& label) -> const std::optional<std::string>& {
        auto it = dynamics.relabel.find(label);
        if (it == dynamics.relabel.end())
            throw UsageError("split: document label '" + label + "' missing from the dynamics");
        return it->second;
    };
    for (size_t i = 0; i < n_pre; ++i) {
        int doc = train_docs[i];
        const auto& mapped = relabel_of(corpus.documents[doc].label);
        if (mapped) // removed labels have no old counterpart; drop their docs
            split.pretrain_train.push_back({doc, *mapped});
    }
    for (size_t i = 0; i < corpus.documents.size(); ++i) {
        if (corpus.documents[i].partition != Partition::validation)
            continue;
        const auto& mapped = relabel_of(corpus.documents[i].label);
        if (mapped)
            split.pretrain_val.push_back({static_cast<int>(i), *mapped});
    }

    std::map<std::string, std::vector<int>> pool;
    for (size_t i = n_pre; i < train_docs.size(); ++i)
        pool[corpus.documents[train_docs[i]].label].push_back(train_docs[i]);
    for (const auto& label : dynamics.new_labels) {
        auto it = pool.find(label);
        if (it == pool.end())
            throw UsageError("split: new label '" + label +
                             "' has no examples in the fine-tuning half");
        std::sort(it->second.begin(), it->second.end());
        Rng label_rng = rng.derive("fine", fnv1a64(label));
        label_rng.shuffle(it->second);
        split.finetune_pool.emplace_back(label, std::move(it->second));
    }

    for (size_t i = 0; i < corpus.documents.size(); ++i)
        if (corpus.documents[i].partition == Partition::test)
            split.test_docs.push_back(static_cast<int>(i));
    return split;
}

ProtocolSplit split_protocol_base(const Corpus& corpus, const LabelDynamics& dynamics, Rng& rng) {
    return split_protocolbase_impl(corpus, dynamics, rng);
}

FinetuneSet take_finetune(const ProtocolSplit& split, int n_fine) {
    if (n_fine < 1)
        throw UsageError("take_finetune: n_fine must be >= 1");
    FinetuneSet out;
    for (const auto& [label, docs] : split.finetune_pool) {
        size_t take = std::min(docs.size(), static_cast<size_t>(n_fine));
        if (take < static_cast<size_t>(n_fine))
            out.short_labels.push_back(label);
        for (size_t i = 0; i < take; ++i)
            out.docs.push_back({docs[i], label});
    }
    return out;
}

StageCorpora make_protocol_split(const Corpus& corpus, const LabelDynamics& dynamics, int n_fine,
                                 Rng& rng) {
    ProtocolSplit split = split_protocol_base(corpus, dynamics, rng);
    FinetuneSet fs = take_finetune(split, n_fine);
    StageCorpora out;
    out.pretrain_train = std::move(split.pretrain_train);
    out.pretrain_val = std::move(split.pretrain_val);
    out.finetune = std::move(fs.docs);
    out.test_docs = std::move(split.test_docs);
    out.short_labels = std::move(fs.short_labels);
    return out;
}

// ---------------------------------------------------------------------------

uint64_t MlpModel::content_hash() const {
    uint64_t h = encoder.content_hash();
    h = fnv1a64(head.W.data(), head.W.size() * sizeof(double), h);
    h = fnv1a64(head.b.data(), head.b.size() * sizeof(double), h);
    return h;
}

MlpModel init_mlp(EncoderParams encoder, const std::vector<std::string>& labels, Rng& rng) {
    MlpModel m;
    m.encoder = std::move(encoder);
    mlp_reinit_head(m, labels, rng);
    return m;
}

void mlp_reinit_head(MlpModel& model, const std::vector<std::string>& labels, Rng& rng) {
    model.head_labels = labels;
    std::sort(model.head_labels.begin(), model.head_labels.end());
    const int d = model.encoder.output_dim();
    const int n = static_cast<int>(model.head_labels.size());
    model.head.in = d;
    model.head.out = n;
    model.head.W.resize(static_cast<size_t>(n) * d);
    model.head.b.assign(n, 0.0);
    double bound = std::sqrt(6.0 / (d + n));
    for (double& w : model.head.W)
        w = rng.uniform(-bound, bound);
    model.head_steps = 0;
    model.m_hW.assign(model.head.W.size(), 0.0);
    model.v_hW.assign(model.head.W.size(), 0.0);
    model.m_hb.assign(model.head.b.size(), 0.0);
    model.v_hb.assign(model.head.b.size(), 0.0);
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_tensor(Vec& w, const Vec& g, Vec& m, Vec& v, double lr, double c1, double c2) {
    for (size_t i = 0; i < w.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
    }
}

std::vector<Vec> head_logits(const MlpModel& model, const std::vector<Vec>& embs) {
    std::vector<Vec> out(embs.size(), Vec(model.head.out, 0.0));
    for (size_t i = 0; i < embs.size(); ++i)
        for (int k = 0; k < model.head.out; ++k) {
            const double* row = model.head.W.data() + static_cast<size_t>(k) * model.head.in;
            double s = model.head.b[k];
            for (int j = 0; j < model.head.in; ++j)
                s += row[j] * embs[i][j];
            out[i][k] = s;
        }
    return out;
}

} // namespace

TrainHistory train_mlp(MlpModel& model, const TokenizedCorpus& corpus, const MlpTrainConfig& cfg,
                       const Rng& rng) {
    if (model.head_labels != corpus.labels)
        throw UsageError("train_mlp: head labels do not match the corpus label set");
    std::vector<int> docs;
    for (const auto& lst : corpus.train_by_label)
        docs.insert(docs.end(), lst.begin(), lst.end());
    std::sort(docs.begin(), docs.end());
    if (docs.empty())
        throw UsageError("train_mlp: no train documents");

    bool use_val = !corpus.validation_docs.empty();
    TrainHistory history;
    MlpModel best = model;
    double best_metric = use_val ? -1.0 : std::numeric_limits<double>::infinity();
    int evals_since_best = 0;

    const int nl = model.head.out;
    Vec head_gw(model.head.W.size());
    Vec head_gb(model.head.b.size());
    ParamGradients acc = ParamGradients::zeros_like(model.encoder);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int> order = docs;
        Rng epoch_rng = rng.derive("epoch", static_cast<uint64_t>(epoch));
        epoch_rng.shuffle(order);
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<const std::vector<int>*> seqs;
            for (size_t i = start; i < end; ++i)
                seqs.push_back(&corpus.tokens[order[i]]);
            Rng drop = rng.derive("dropout", static_cast<uint64_t>(epoch))
                           .derive("batch", static_cast<uint64_t>(n_batches));
            std::vector<ForwardTrace> traces;
            auto embs = encode_batch(model.encoder, seqs, Mode::train, drop, cfg.exec, &traces);
            auto logits = head_logits(model, embs);

            const double inv_b = 1.0 / static_cast<double>(end - start);
            std::fill(head_gw.begin(), head_gw.end(), 0.0);
            std::fill(head_gb.begin(), head_gb.end(), 0.0);
            std::vector<Vec> demb(embs.size(), Vec(model.head.in, 0.0));
            double batch_loss = 0.0;
            for (size_t i = 0; i < embs.size(); ++i) {
                int truth = corpus.label_ids[order[start + i]];
                Vec& lg = logits[i];
                double m = lg[0];
                for (int k = 1; k < nl; ++k)
                    m = std::max(m, lg[k]);
                double z = 0.0;
                for (int k = 0; k < nl; ++k)
                    z += std::exp(lg[k] - m);
                batch_loss += m + std::log(z) - lg[truth];
                for (int k = 0; k < nl; ++k) {
                    double sigma = std::exp(lg[k] - m) / z;
                    double dl = inv_b * (sigma - (k == truth ? 1.0 : 0.0));
                    double* grow = head_gw.data() + static_cast<size_t>(k) * model.head.in;
                    const double* wrow =
                        model.head.W.data() + static_cast<size_t>(k) * model.head.in;
                    for (int j = 0; j < model.head.in; ++j) {
                        grow[j] += dl * embs[i][j];
                        demb[i][j] += dl * wrow[j];
                    }
                    head_gb[k] += dl;
                }
            }
            batch_loss *= inv_b;
            if (!std::isfinite(batch_loss))
                throw NumericalError("train_mlp: non-finite loss at epoch " +
                                     std::to_string(epoch));
            epoch_loss += batch_loss;
            ++n_batches;

            acc.reset();
            backward_batch(model.encoder, traces, demb, cfg.exec, acc);
            adam_step(model.encoder, acc, cfg.lr);
            model.head_steps += 1;
            double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(model.head_steps));
            double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(model.head_steps));
            adam_tensor(model.head.W, head_gw, model.m_hW, model.v_hW, cfg.lr, c1, c2);
            adam_tensor(model.head.b, head_gb, model.m_hb, model.v_hb, cfg.lr, c1, c2);
        }
        epoch_loss /= std::max(1, n_batches);

        HistoryEntry entry{epoch, epoch_loss, std::nullopt};
        double metric;
        bool improved;
        if (use_val) {
            std::vector<const std::vector<int>*> vseqs;
            for (int d : corpus.validation_docs)
                vseqs.push_back(&corpus.tokens[d]);
            auto pred = mlp_classify_batch(model, vseqs, cfg.exec);
            long correct = 0;
            for (size_t i = 0; i < vseqs.size(); ++i)
                correct += pred[i] == corpus.label_ids[corpus.validation_docs[i]];
            metric = static_cast<double>(correct) / static_cast<double>(vseqs.size());
            entry.val_accuracy = metric;
            improved = metric > best_metric;
        } else {
            metric = epoch_loss;
            improved = metric < best_metric;
        }
        history.entries.push_back(entry);
        if (improved) {
            best_metric = metric;
            best = model;
            history.best_episode = epoch;
            evals_since_best = 0;
        } else if (++evals_since_best >= cfg.patience) {
            break;
        }
    }
    if (history.best_episode > 0)
        model = std::move(best);
    return history;
}

std::vector<int> mlp_classify_batch(const MlpModel& model,
                                    const std::vector<const std::vector<int>*>& seqs, Exec exec) {
    Rng unused(0);
    auto embs = encode_batch(model.encoder, seqs, Mode::eval, unused, exec);
    auto logits = head_logits(model, embs);
    std::vector<int> out(seqs.size());
    for (size_t i = 0; i < seqs.size(); ++i) {
        int best = 0;
        for (int k = 1; k < model.head.out; ++k)
            if (logits[i][k] > logits[i][best])
                best = k;
        out[i] = best;
    }
    return out;
}

int knn_classify(const std::vector<Vec>& ref_encodings, const std::vector<int>& ref_labels,
                 const Vec& query, int k) {
    if (ref_encodings.empty() || ref_encodings.size() != ref_labels.size())
        throw UsageError("knn_classify: empty or mismatched reference set");
    if (k < 1)
        throw UsageError("knn_classify: k must be >= 1");
    k = std::min<int>(k, static_cast<int>(ref_encodings.size()));
    struct Entry {
        double dist;
        int label;
        int idx;
        bool operator<(const Entry& o) const {
            return std::tie(dist, label, idx) < std::tie(o.dist, o.label, o.idx);
        }
    };
    std::vector<Entry> entries;
    entries.reserve(ref_encodings.size());
    for (size_t i = 0; i < ref_encodings.size(); ++i) {
        double s = 0.0;
        for (size_t j = 0; j < query.size(); ++j) {
            double d = query[j] - ref_encodings[i][j];
            s += d * d;
        }
        entries.push_back({s, ref_labels[i], static_cast<int>(i)});
    }
    std::partial_sort(entries.begin(), entries.begin() + k, entries.end());

    std::map<int, int> votes;
    for (int i = 0; i < k; ++i)
        votes[entries[i].label] += 1;
    int max_votes = 0;
    for (const auto& [label, v] : votes)
        max_votes = std::max(max_votes, v);
    // vote ties: summed inverse distance, then the smaller label id
    int best_label = -1;
    double best_weight = -1.0;
    for (const auto& [label, v] : votes) { // ascending label order
        if (v != max_votes)
            continue;
        double w = 0.0;
        for (int i = 0; i < k; ++i)
            if (entries[i].label == label)
                w += 1.0 / std::max(std::sqrt(entries[i].dist), 1e-12);
        if (w > best_weight) {
            best_weight = w;
            best_label = label;
        }
    }
    return best_label;
}

// ---------------------------------------------------------------------------

const char* model_kind_name(ModelKind k) {
    switch (k) {
    case ModelKind::mlp: return "mlp";
    case ModelKind::euc: return "euc";
    case ModelKind::hyp: return "hyp";
    }
    return "?";
}

ModelKind parse_model_kind(const std::string& s) {
    if (s == "mlp" || s == "MLP")
        return ModelKind::mlp;
    if (s == "euc" || s == "EUC")
        return ModelKind::euc;
    if (s == "hyp" || s == "HYP")
        return ModelKind::hyp;
    throw UsageError("unknown model kind '" + s + "' (expected mlp, euc or hyp)");
}

namespace {

struct BaseData {
    Vocabulary vocab;
    std::vector<std::vector<int>> tokens;
    std::vector<std::string> doc_labels;
};

BaseData prepare_base(const Corpus& corpus, int min_count) {
    BaseData base;
    base.vocab = build_vocabulary(corpus, min_count);
    base.tokens.reserve(corpus.documents.size());
    for (const auto& d : corpus.documents) {
        std::vector<int> ids;
        for (const auto& t : tokenize(d.text))
            ids.push_back(base.vocab.lookup(t));
        base.tokens.push_back(std::move(ids));
        base.doc_labels.push_back(d.label);
    }
    return base;
}

TokenizedCorpus stage_corpus(const BaseData& base, const std::vector<StagedDoc>& train,
                             const std::vector<StagedDoc>& val) {
    std::vector<std::vector<int>> seqs;
    std::vector<std::string> labels;
    std::vector<Partition> parts;
    seqs.reserve(train.size() + val.size());
    for (const auto& sd : train) {
        seqs.push_back(base.tokens[sd.doc]);
        labels.push_back(sd.label);
        parts.push_back(Partition::train);
    }
    for (const auto& sd : val) {
        seqs.push_back(base.tokens[sd.doc]);
        labels.push_back(sd.label);
        parts.push_back(Partition::validation);
    }
    return assemble_tokenized(seqs, labels, parts);
}

Metric kind_metric(ModelKind k) {
    return k == ModelKind::hyp ? Metric::hyperbolic : Metric::euclidean;
}

struct PretrainedState {
    EncoderParams encoder; // prototypical kinds
    std::optional<MlpModel> mlp;

    uint64_t hash() const { return mlp ? mlp->content_hash() : encoder.content_hash(); }
};

PretrainedState pretrain_seed(const BaseData& base, const ProtocolConfig& cfg, ModelKind kind,
                              const ProtocolSplit& split, const Rng& seed_rng) {
    TokenizedCorpus ptc = stage_corpus(base, split.pretrain_train, split.pretrain_val);
    std::string name = model_kind_name(kind);
    Rng init_rng = seed_rng.derive("init-" + name);
    EncoderParams enc = init_encoder(base.vocab, cfg.encoder, init_rng);
    PretrainedState out{std::move(enc), std::nullopt};
    if (kind == ModelKind::mlp) {
        Rng head_rng = seed_rng.derive("head-mlp");
        out.mlp = init_mlp(std::move(out.encoder), ptc.labels, head_rng);
        out.encoder = EncoderParams{};
        train_mlp(*out.mlp, ptc, cfg.mlp_pretrain, seed_rng.derive("pretrain-mlp"));
    } else {
        EpisodeConfig ecfg = cfg.episode;
        ecfg.metric = kind_metric(kind);
        train_episodic(out.encoder, ptc, ecfg, cfg.pretrain, seed_rng.derive("pretrain-" + name));
    }
    return out;
}

// n_fine examples per label split into a train part and (when the budget
// allows a fifth) a held-out validation part for early stopping
struct FinetuneStage {
    std::vector<StagedDoc> train, val, all;
};

FinetuneStage finetune_stage(const ProtocolSplit& split, int n_fine) {
    FinetuneStage st;
    for (const auto& [label, docs] : split.finetune_pool) {
        size_t take = std::min(docs.size(), static_cast<size_t>(n_fine));
        size_t n_val = take >= 5 ? take / 5 : 0;
        for (size_t i = 0; i < take; ++i) {
            st.all.push_back({docs[i], label});
            if (i < take - n_val)
                st.train.push_back({docs[i], label});
            else
                st.val.push_back({docs[i], label});
        }
    }
    return st;
}

struct TestScore {
    double overall = 0.0;
    std::optional<double> new_only;
    int n_test = 0, n_new = 0;
};

TestScore score_predictions(const std::vector<std::string>& pred,
                            const std::vector<int>& test_docs, const BaseData& base,
                            const LabelDynamics& dynamics) {
    std::set<std::string> introduced(dynamics.introduced.begin(), dynamics.introduced.end());
    TestScore s;
    long correct = 0, new_correct = 0;
    for (size_t i = 0; i < test_docs.size(); ++i) {
        const std::string& truth = base.doc_labels[test_docs[i]];
        bool ok = pred[i] == truth;
        correct += ok;
        if (introduced.count(truth)) {
            s.n_new += 1;
            new_correct += ok;
        }
    }
    s.n_test = static_cast<int>(test_docs.size());
    s.overall = s.n_test ? static_cast<double>(correct) / s.n_test : 0.0;
    if (!introduced.empty() && s.n_new > 0)
        s.new_only = static_cast<double>(new_correct) / s.n_new;
    return s;
}

std::vector<std::string> ids_to_names(const std::vector<int>& ids,
                                      const std::vector<std::string>& names) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids)
        out.push_back(names[id]);
    return out;
}

SeedResult run_seed_cell(const BaseData& base, const ProtocolConfig& cfg, ModelKind kind,
                         int n_fine, bool tuned, const LabelDynamics& dynamics,
                         const ProtocolSplit& split, const PretrainedState& pretrained,
                         const Rng& seed_rng, int seed_index) {
    FinetuneStage stage = finetune_stage(split, n_fine);
    TokenizedCorpus fine_all = stage_corpus(base, stage.all, {});
    std::vector<std::string> short_labels;
    for (const auto& [label, docs] : split.finetune_pool)
        if (docs.size() < static_cast<size_t>(n_fine))
            short_labels.push_back(label);
    std::vector<const std::vector<int>*> test_seqs;
    for (int d : split.test_docs)
        test_seqs.push_back(&base.tokens[d]);

    std::string name = model_kind_name(kind);
    SeedResult res;
    res.seed_index = seed_index;
    res.short_labels = std::move(short_labels);
    std::vector<std::string> pred;

    if (kind == ModelKind::mlp) {
        MlpModel model = *pretrained.mlp;
        if (tuned) {
            TokenizedCorpus fine_tc = stage_corpus(base, stage.train, stage.val);
            Rng head_rng = seed_rng.derive("finetune-head-mlp");
            mlp_reinit_head(model, fine_tc.labels, head_rng);
            train_mlp(model, fine_tc, cfg.mlp_finetune, seed_rng.derive("finetune-mlp"));
            pred = ids_to_names(mlp_classify_batch(model, test_seqs, cfg.exec),
                                model.head_labels);
        } else {
            // KNN over penultimate (encoder-output) encodings of the n_fine set
            uint64_t before = model.content_hash();
            std::vector<const std::vector<int>*> ref_seqs;
            std::vector<int> ref_labels;
            for (int l = 0; l < fine_all.n_labels(); ++l)
                for (int d : fine_all.train_by_label[l]) {
                    ref_seqs.push_back(&fine_all.tokens[d]);
                    ref_labels.push_back(l);
                }
            Rng unused(0);
            auto refs = encode_batch(model.encoder, ref_seqs, Mode::eval, unused, cfg.exec);
            auto queries = encode_batch(model.encoder, test_seqs, Mode::eval, unused, cfg.exec);
            std::vector<int> ids(queries.size());
            if (cfg.exec == Exec::serial) {
                for (size_t i = 0; i < queries.size(); ++i)
                    ids[i] = knn_classify(refs, ref_labels, queries[i], cfg.knn_k);
            } else {
#pragma omp parallel for schedule(static)
                for (size_t i = 0; i < queries.size(); ++i)
                    ids[i] = knn_classify(refs, ref_labels, queries[i], cfg.knn_k);
            }
            pred = ids_to_names(ids, fine_all.labels);
            res.untuned_params_unchanged = model.content_hash() == before;
        }
    } else {
        EncoderParams params = pretrained.encoder;
        Metric metric = kind_metric(kind);
        uint64_t before = params.content_hash();
        if (tuned) {
            TokenizedCorpus fine_tc = stage_corpus(base, stage.train, stage.val);
            int n_train_min = std::numeric_limits<int>::max();
            for (const auto& lst : fine_tc.train_by_label)
                n_train_min = std::min(n_train_min, static_cast<int>(lst.size()));
            EpisodeConfig ecfg = cfg.episode;
            ecfg.metric = metric;
            ecfg.n_support = std::min(ecfg.n_support, n_train_min - 1);
            if (ecfg.n_support < 1)
                throw UsageError("fine-tuning needs at least 2 examples for some label (n_fine " +
                                 std::to_string(n_fine) + ")");
            train_episodic(params, fine_tc, ecfg, cfg.finetune,
                           seed_rng.derive("finetune-" + name));
        }
        PrototypeSet protos = build_final_prototypes(params, fine_all, metric,
                                                     cfg.episode.eval_mean_iters, cfg.exec);
        pred = ids_to_names(classify_batch(params, protos, test_seqs, cfg.exec), fine_all.labels);
        if (!tuned)
            res.untuned_params_unchanged = params.content_hash() == before;
    }

    TestScore s = score_predictions(pred, split.test_docs, base, dynamics);
    res.overall = s.overall;
    res.new_only = s.new_only;
    res.n_test = s.n_test;
    res.n_new_test = s.n_new;
    return res;
}

LabelDynamics make_dynamics(const Corpus& corpus, double p, Rng& rng) {
    if (corpus.hierarchy)
        return collapse_labels(*corpus.hierarchy, p, rng);
    return remove_labels(corpus.labels, p, rng);
}

template <class F>
auto annotate_seed(int seed_index, F&& f) {
    auto tag = [&](const char* what) {
        return "seed " + std::to_string(seed_index) + ": " + what;
    };
    try {
        return f();
    } catch (const UsageError& e) {
        throw UsageError(tag(e.what()));
    } catch (const DataError& e) {
        throw DataError(tag(e.what()));
    } catch (const NumericalError& e) {
        throw NumericalError(tag(e.what()));
    }
}

} // namespace

EvalReport aggregate_report(std::vector<SeedResult> per_seed) {
    std::sort(per_seed.begin(), per_seed.end(),
              [](const SeedResult& a, const SeedResult& b) { return a.seed_index < b.seed_index; });
    EvalReport rep;
    rep.per_seed = std::move(per_seed);
    const size_t n = rep.per_seed.size();
    if (n == 0)
        return rep;
    double sum = 0.0;
    for (const auto& s : rep.per_seed)
        sum += s.overall;
    rep.overall_mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (const auto& s : rep.per_seed)
        var += (s.overall - rep.overall_mean) * (s.overall - rep.overall_mean);
    rep.overall_std = std::sqrt(var / static_cast<double>(n));

    std::vector<double> news;
    for (const auto& s : rep.per_seed)
        if (s.new_only)
            news.push_back(*s.new_only);
    if (!news.empty()) {
        double nsum = 0.0;
        for (double v : news)
            nsum += v;
        double nmean = nsum / static_cast<double>(news.size());
        double nvar = 0.0;
        for (double v : news)
            nvar += (v - nmean) * (v - nmean);
        rep.new_only_mean = nmean;
        rep.new_only_std = std::sqrt(nvar / static_cast<double>(news.size()));
    }
    return rep;
}

EvalReport run_protocol(const Corpus& corpus, const ProtocolConfig& cfg, uint64_t master_seed) {
    if (cfg.n_seeds < 1 || cfg.n_fine < 1)
        throw UsageError("run_protocol: n_seeds and n_fine must be >= 1");
    if (cfg.p_removed <= 0.0 || cfg.p_removed >= 1.0)
        throw UsageError("run_protocol: p_removed must lie in (0,1)");
    BaseData base = prepare_base(corpus, cfg.min_count);
    std::vector<SeedResult> results;
    for (int s = 0; s < cfg.n_seeds; ++s) {
        annotate_seed(s, [&] {
            Rng seed_rng = Rng(master_seed).derive("protocol", static_cast<uint64_t>(s));
            Rng dyn_rng = seed_rng.derive("dynamics");
            LabelDynamics dynamics = make_dynamics(corpus, cfg.p_removed, dyn_rng);
            Rng split_rng = seed_rng.derive("split");
            ProtocolSplit split = split_protocol_base(corpus, dynamics, split_rng);
            PretrainedState pre = pretrain_seed(base, cfg, cfg.kind, split, seed_rng);
            results.push_back(run_seed_cell(base, cfg, cfg.kind, cfg.n_fine, cfg.tuned, dynamics,
                                            split, pre, seed_rng, s));
            return 0;
        });
    }
    return aggregate_report(std::move(results));
}

std::map<GridCell, EvalReport> run_protocol_grid(const Corpus& corpus, const ProtocolConfig& base_cfg,
                                                 const GridSpec& spec, uint64_t master_seed,
                                                 int jobs) {
    if (spec.kinds.empty() || spec.n_fines.empty() || (!spec.run_tuned && !spec.run_untuned))
        throw UsageError("run_protocol_grid: empty grid");
    BaseData base = prepare_base(corpus, base_cfg.min_count);
    std::vector<GridCell> cells;
    for (ModelKind kind : spec.kinds)
        for (int nf : spec.n_fines) {
            if (spec.run_tuned)
                cells.push_back({kind, nf, true});
            if (spec.run_untuned)
                cells.push_back({kind, nf, false});
        }

    const int n_seeds = base_cfg.n_seeds;
    std::vector<std::vector<SeedResult>> per_seed(n_seeds); // aligned with cells
    std::vector<std::string> errors(n_seeds);
    jobs = std::max(1, jobs);

#pragma omp parallel for schedule(dynamic) num_threads(jobs) if (jobs > 1)
    for (int s = 0; s < n_seeds; ++s) {
        try {
            annotate_seed(s, [&] {
                Rng seed_rng = Rng(master_seed).derive("protocol", static_cast<uint64_t>(s));
                Rng dyn_rng = seed_rng.derive("dynamics");
                LabelDynamics dynamics = make_dynamics(corpus, base_cfg.p_removed, dyn_rng);
                Rng split_rng = seed_rng.derive("split");
                ProtocolSplit split = split_protocol_base(corpus, dynamics, split_rng);
                std::map<ModelKind, PretrainedState> pretrained;
                for (ModelKind kind : spec.kinds)
                    pretrained.emplace(kind, pretrain_seed(base, base_cfg, kind, split, seed_rng));
                for (const GridCell& cell : cells)
                    per_seed[s].push_back(run_seed_cell(base, base_cfg, cell.kind, cell.n_fine,
                                                        cell.tuned, dynamics, split,
                                                        pretrained.at(cell.kind), seed_rng, s));
                return 0;
            });
        } catch (const std::exception& e) {
            errors[s] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty())
            throw UsageError(e);

    std::map<GridCell, EvalReport> out;
    for (size_t c = 0; c < cells.size(); ++c) {
        std::vector<SeedResult> rs;
        for (int s = 0; s < n_seeds; ++s)
            rs.push_back(per_seed[s][c]);
        out.emplace(cells[c], aggregate_report(std::move(rs)));
    }
    return out;
}

std::string report_to_jsonl(const EvalReport& report) {
    std::string out;
    for (const auto& s : report.per_seed) {
        json j;
        j["seed"] = s.seed_index;
        j["overall_accuracy"] = s.overall;
        if (s.new_only)
            j["new_only_accuracy"] = *s.new_only;
        j["n_test"] = s.n_test;
        j["n_new_test"] = s.n_new_test;
        if (s.untuned_params_unchanged)
            j["untuned_params_unchanged"] = *s.untuned_params_unchanged;
        if (!s.short_labels.empty())
            j["short_labels"] = s.short_labels;
        out += j.dump();
        out += '\n';
    }
    json agg;
    agg["aggregate"] = true;
    agg["n_seeds"] = report.per_seed.size();
    agg["overall_mean"] = report.overall_mean;
    agg["overall_std"] = report.overall_std;
    if (report.new_only_mean) {
        agg["new_only_mean"] = *report.new_only_mean;
        agg["new_only_std"] = *report.new_only_std;
    }
    out += agg.dump();
    out += '\n';
    return out;
}

void write_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write report file: " + path);
    out << report_to_jsonl(report);
}

std::string format_mean_std(double mean, double stddev) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f±%.1f", mean * 100.0, stddev * 100.0);
    return buf;
}

std::string summary_table_csv(const std::map<GridCell, EvalReport>& cells) {
    std::set<int> nfines;
    std::vector<std::pair<ModelKind, bool>> rows;
    for (const auto& [cell, rep] : cells) {
        nfines.insert(cell.n_fine);
        std::pair<ModelKind, bool> row{cell.kind, cell.tuned};
        if (std::find(rows.begin(), rows.end(), row) == rows.end())
            rows.push_back(row);
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first)
            return static_cast<int>(a.first) < static_cast<int>(b.first);
        return a.second > b.second; // tuned rows first
    });
    std::string out = "model,tuned";
    for (int nf : nfines)
        out += ",n_fine=" + std::to_string(nf);
    out += '\n';
    for (const auto& [kind, tuned] : rows) {
        out += model_kind_name(kind);
        out += tuned ? ",tuned" : ",untuned";
        for (int nf : nfines) {
            auto it = cells.find(GridCell{kind, nf, tuned});
            out += ',';
            if (it != cells.end())
                out += format_mean_std(it->second.overall_mean, it->second.overall_std);
        }
        out += '\n';
    }
    return out;
}

} // namespace dyncls
