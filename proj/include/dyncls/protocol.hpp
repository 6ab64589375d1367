#pragma once

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dyncls/data.hpp"
#include "dyncls/episodic.hpp"

namespace dyncls {

// The dynamic-classification experiment: mutate the label space, pretrain on
// the old labels, adapt to the new ones with n_fine examples per label (or
// not, for the un-tuned variants), evaluate on the untouched test split, and
// aggregate over seeds. Every stage draws from a named substream of the seed,
// so any single stage is independently reproducible.

struct LabelDynamics {
    std::vector<std::string> old_labels; // sorted
    std::vector<std::string> new_labels; // sorted
    // new label -> old label carrying its pretraining examples; nullopt means
    // those examples are dropped (removed labels have no old counterpart)
    std::map<std::string, std::optional<std::string>> relabel;
    std::vector<std::string> introduced; // sorted, = new \ old
};

LabelDynamics identity_dynamics(const std::vector<std::string>& labels);

// Randomly chosen parents absorb all their leaf children until at least a
// p fraction of leaves has changed label. The root never absorbs.
LabelDynamics collapse_labels(const LabelHierarchy& hierarchy, double p, Rng& rng);

// ceil(p * n) labels drawn uniformly; their pretraining examples are dropped.
LabelDynamics remove_labels(const std::vector<std::string>& labels, double p, Rng& rng);

struct StagedDoc {
    int doc; // index into the source corpus documents
    std::string label;
};

// Train docs split 50/50 into a relabeled pretraining half and a fine-tuning
// pool; validation docs are relabeled for pretraining-time early stopping;
// the test partition is untouched. The per-label fine-tune pools are
// pre-shuffled so an n_fine subset is just the list prefix (smaller budgets
// nest inside larger ones).
struct ProtocolSplit {
    std::vector<StagedDoc> pretrain_train;
    std::vector<StagedDoc> pretrain_val;
    std::vector<std::pair<std::string, std::vector<int>>> finetune_pool; // label -> doc ids
    std::vector<int> test_docs;
};

ProtocolSplit split_protocol_base(const Corpus& corpus, const LabelDynamics& dynamics, Rng& rng);

struct FinetuneSet {
    std::vector<StagedDoc> docs;
    std::vector<std::string> short_labels; // labels with fewer than n_fine examples
};

// First n_fine pool entries per label; a label short on examples contributes
// everything it has and is flagged.
FinetuneSet take_finetune(const ProtocolSplit& split, int n_fine);

struct StageCorpora {
    std::vector<StagedDoc> pretrain_train, pretrain_val;
    std::vector<StagedDoc> finetune;
    std::vector<int> test_docs;
    std::vector<std::string> short_labels;
};

StageCorpora make_protocol_split(const Corpus& corpus, const LabelDynamics& dynamics, int n_fine,
                                 Rng& rng);

// ---------------------------------------------------------------------------
// MLP baseline: the shared encoder plus a linear head trained with softmax
// cross entropy. Fine-tuning keeps the encoder and reinitializes the head.

struct MlpModel {
    EncoderParams encoder;
    AffineLayer head;
    std::vector<std::string> head_labels; // sorted; row i scores head_labels[i]
    uint64_t head_steps = 0;
    Vec m_hW, v_hW, m_hb, v_hb;

    uint64_t content_hash() const;
};

struct MlpTrainConfig {
    int epochs = 100;
    int batch_size = 32;
    double lr = 0.001;
    int patience = 8; // evaluations (one per epoch) without improvement
    Exec exec = Exec::parallel;
};

MlpModel init_mlp(EncoderParams encoder, const std::vector<std::string>& labels, Rng& rng);
void mlp_reinit_head(MlpModel& model, const std::vector<std::string>& labels, Rng& rng);

// corpus.labels must equal model.head_labels
TrainHistory train_mlp(MlpModel& model, const TokenizedCorpus& corpus, const MlpTrainConfig& cfg,
                       const Rng& rng);

std::vector<int> mlp_classify_batch(const MlpModel& model,
                                    const std::vector<const std::vector<int>*>& seqs, Exec exec);

// Majority vote among the k nearest references by Euclidean distance in the
// penultimate (encoder-output) space; vote ties break by summed inverse
// distance, then by the smaller label id. k is clamped to the reference count.
int knn_classify(const std::vector<Vec>& ref_encodings, const std::vector<int>& ref_labels,
                 const Vec& query, int k);

// ---------------------------------------------------------------------------
// Protocol runs

enum class ModelKind { mlp, euc, hyp };
const char* model_kind_name(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

struct ProtocolConfig {
    double p_removed = 0.3;
    int n_fine = 5;
    int n_seeds = 5;
    ModelKind kind = ModelKind::euc;
    bool tuned = true;
    int knn_k = 5;
    int min_count = 1;

    EncoderInit encoder;
    EpisodeConfig episode; // metric is overridden per kind
    TrainConfig pretrain;
    TrainConfig finetune;
    MlpTrainConfig mlp_pretrain;
    MlpTrainConfig mlp_finetune;
    Exec exec = Exec::parallel;
};

struct SeedResult {
    int seed_index = 0;
    double overall = 0.0;
    std::optional<double> new_only; // absent when nothing was introduced
    int n_test = 0;
    int n_new_test = 0;
    std::optional<bool> untuned_params_unchanged; // set on un-tuned runs
    std::vector<std::string> short_labels;        // labels with fewer than n_fine examples
};

struct EvalReport {
    std::vector<SeedResult> per_seed;
    double overall_mean = 0.0, overall_std = 0.0;
    std::optional<double> new_only_mean, new_only_std;
};

EvalReport aggregate_report(std::vector<SeedResult> per_seed);

EvalReport run_protocol(const Corpus& corpus, const ProtocolConfig& cfg, uint64_t master_seed);

// Grid over kinds x n_fine x tuned/un-tuned. Pretraining depends only on
// (seed, kind) and is shared across the cells of a seed, which is exactly why
// cell results match independent run_protocol calls with the same master
// seed. jobs > 1 distributes seeds across threads.
struct GridCell {
    ModelKind kind;
    int n_fine = 0;
    bool tuned = true;
    auto operator<=>(const GridCell&) const = default;
};

struct GridSpec {
    std::vector<ModelKind> kinds;
    std::vector<int> n_fines;
    bool run_tuned = true;
    bool run_untuned = true;
};

std::map<GridCell, EvalReport> run_protocol_grid(const Corpus& corpus, const ProtocolConfig& base,
                                                 const GridSpec& spec, uint64_t master_seed,
                                                 int jobs);

// one JSON record per seed plus an aggregate record
std::string report_to_jsonl(const EvalReport& report);
void write_report(const EvalReport& report, const std::string& path);

// accuracy percent with one decimal, "64.8±2.8"
std::string format_mean_std(double mean, double stddev);

// rows model x tuned, one column per n_fine
std::string summary_table_csv(const std::map<GridCell, EvalReport>& cells);

} // namespace dyncls
