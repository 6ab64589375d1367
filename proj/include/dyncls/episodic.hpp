#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dyncls/batch.hpp"
#include "dyncls/data.hpp"
#include "dyncls/encoder.hpp"

namespace dyncls {

// Episodic prototypical training: sample a label subset with disjoint support
// and query sets, embed, build one prototype per class, score queries by the
// softmax over negative squared distances, and descend the mean negative log
// probability of the true class.

struct EpisodeConfig {
    int n_classes = 0; // 0 = every eligible label, the default policy
    int n_support = 4;
    int n_query = 64;
    Metric metric = Metric::euclidean;
    int train_mean_iters = 5;
    int eval_mean_iters = 100;
};

struct Episode {
    std::vector<int> class_ids;
    std::vector<std::vector<int>> support; // doc indices per class
    std::vector<std::vector<int>> query;
};

// Uniform class sample without replacement among labels holding at least
// N_S + 1 train examples; supports without replacement, queries from the
// remainder (with replacement only when the remainder is smaller than N_Q).
Episode sample_episode(const TokenizedCorpus& corpus, const EpisodeConfig& cfg, Rng& rng);

struct EpisodeLoss {
    double loss = 0.0;
    std::vector<Vec> query_grads;     // wrt the pre-lift query embeddings
    std::vector<Vec> prototype_grads; // euclidean only; aligned with the prototype set
};

// query_labels[i] is the true label id for embedding i. Gradients flow to the
// queries in both metrics; prototypes are differentiable in the euclidean
// metric only (hyperbolic means are treated as constants).
EpisodeLoss episode_loss(const PrototypeSet& protos, const std::vector<Vec>& query_embeddings,
                         const std::vector<int>& query_labels, Exec exec);

struct EarlyStopConfig {
    enum class Criterion { validation_accuracy, train_loss, none };
    Criterion criterion = Criterion::validation_accuracy;
    int eval_interval = 250;
    int patience = 8;
};

struct TrainConfig {
    int episodes = 10000;
    double lr = 0.001;
    EarlyStopConfig early;
    Exec exec = Exec::parallel;
};

struct HistoryEntry {
    int episode = 0;
    double loss = 0.0;
    std::optional<double> val_accuracy;
};

struct TrainHistory {
    std::vector<HistoryEntry> entries;
    int best_episode = 0; // 0 when no checkpoint was ever taken
};

// records file: one JSON object per line
void write_history(const TrainHistory& history, const std::string& path);
std::string history_to_string(const TrainHistory& history);

// Episodic training loop over the corpus train partition. Keeps the
// best-checkpoint parameters when early stopping is active. All randomness
// derives from `rng`, so equal seeds give bit-identical histories.
TrainHistory train_episodic(EncoderParams& params, const TokenizedCorpus& corpus,
                            const EpisodeConfig& cfg, const TrainConfig& tcfg, const Rng& rng);

// One prototype per label over every train example of that label.
PrototypeSet build_final_prototypes(const EncoderParams& params, const TokenizedCorpus& corpus,
                                    Metric metric, int eval_mean_iters, Exec exec);

struct Classification {
    int label_id = -1;
    Vec scores; // softmax over negative squared distances, prototype order
};

// Nearest prototype by squared distance; ties go to the smallest label id.
Classification classify(const EncoderParams& params, const PrototypeSet& protos,
                        const std::vector<int>& tokens);

// label id per sequence
std::vector<int> classify_batch(const EncoderParams& params, const PrototypeSet& protos,
                                const std::vector<const std::vector<int>*>& seqs, Exec exec);

// fraction of docs whose nearest prototype matches their label
double prototype_accuracy(const EncoderParams& params, const PrototypeSet& protos,
                          const TokenizedCorpus& corpus, const std::vector<int>& docs, Exec exec);

} // namespace dyncls
