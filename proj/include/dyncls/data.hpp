#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dyncls/encoder.hpp"
#include "dyncls/errors.hpp"
#include "dyncls/rng.hpp"

namespace dyncls {

enum class Partition { train, validation, test };

const char* partition_name(Partition p);
Partition parse_partition(const std::string& s);

struct Document {
    std::string text;
    std::string label;
    Partition partition = Partition::train;
    // category names from the root's child down to the leaf's parent; the
    // leaf itself is `label`
    std::vector<std::string> parent_path;
    bool has_parent_path = false;
};

struct LabelHierarchy {
    struct Node {
        std::string name;
        int parent = -1;
        std::vector<int> children; // node indices
        bool leaf = false;
    };
    std::vector<Node> nodes; // nodes[0] is the root

    int depth() const; // root at depth 0
    std::vector<std::string> leaf_labels() const;
    // parent -> sorted leaf-child names, for structural comparisons
    std::string signature() const;
};

struct Corpus {
    std::vector<Document> documents;
    std::vector<std::string> labels; // sorted unique
    std::optional<LabelHierarchy> hierarchy;

    size_t count(Partition p) const;
};

// One JSON record per line with fields text, label, partition and optional
// parent_path. The hierarchy is reconstructed when every document carries a
// parent_path; a mix of some-with and some-without is rejected.
Corpus load_corpus(const std::string& path);

// Canonical form: compact JSON with sorted keys, one record per line.
void write_corpus(const Corpus& corpus, const std::string& path);
std::string corpus_to_string(const Corpus& corpus);
Corpus corpus_from_string(const std::string& content, const std::string& origin = "<memory>");

// lowercase, split at whitespace; punctuation runs become single tokens
std::vector<std::string> tokenize(const std::string& text);

// Frequencies counted over the train partition; tokens kept at
// frequency >= min_count, ordered by (-count, token); UNK appended.
Vocabulary build_vocabulary(const Corpus& corpus, int min_count);

struct SynthSpec {
    int n_parents = 4;
    int children_per_parent = 3;
    int docs_per_leaf = 200;
    int tokens_per_doc = 30;
    int parent_pool = 40; // tokens shared across a parent's children
    int child_pool = 20;  // tokens unique to one leaf
    double overlap = 0.5; // probability a token comes from the parent pool
    uint64_t seed = 0;
};

// Two-level hierarchy of topic clusters with per-leaf disjoint sub-pools;
// partitions assigned 70/10/20. Fully determined by spec.seed.
Corpus generate_synthetic(const SynthSpec& spec);

// Corpus view used by training: documents tokenized against a fixed
// vocabulary, labels as dense ids (index into `labels`).
struct TokenizedCorpus {
    std::vector<std::string> labels; // sorted
    std::vector<std::vector<int>> tokens;
    std::vector<int> label_ids;
    std::vector<Partition> partitions;
    std::vector<std::vector<int>> train_by_label; // doc indices
    std::vector<int> validation_docs, test_docs;

    int n_labels() const { return static_cast<int>(labels.size()); }
};

TokenizedCorpus tokenize_corpus(const Corpus& corpus, const Vocabulary& vocab);

// Same, but over (token-seq, label-name, partition) triples; used by the
// protocol stages where documents were relabeled.
TokenizedCorpus assemble_tokenized(const std::vector<std::vector<int>>& token_seqs,
                                   const std::vector<std::string>& doc_labels,
                                   const std::vector<Partition>& partitions);

} // namespace dyncls
