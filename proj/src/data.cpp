#include "dyncls/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dyncls {

using json = nlohmann::json;

const char* partition_name(Partition p) {
    switch (p) {
    case Partition::train: return "train";
    case Partition::validation: return "validation";
    case Partition::test: return "test";
    }
    return "?";
}

Partition parse_partition(const std::string& s) {
    if (s == "train")
        return Partition::train;
    if (s == "validation")
        return Partition::validation;
    if (s == "test")
        return Partition::test;
    throw DataError("unknown partition '" + s + "'");
}

int LabelHierarchy::depth() const {
    int best = 0;
    for (size_t i = 0; i < nodes.size(); ++i) {
        int d = 0;
        for (int n = static_cast<int>(i); nodes[n].parent >= 0; n = nodes[n].parent)
            ++d;
        best = std::max(best, d);
    }
    return best;
}

std::vector<std::string> LabelHierarchy::leaf_labels() const {
    std::vector<std::string> out;
    for (const auto& n : nodes)
        if (n.leaf)
            out.push_back(n.name);
    std::sort(out.begin(), out.end());
    return out;
}

std::string LabelHierarchy::signature() const {
    // canonical bottom-up string per node: name-independent structure plus
    // leaf names, children sorted
    std::vector<std::string> sig(nodes.size());
    // nodes were appended parent-before-child, so reverse order is bottom-up
    for (size_t i = nodes.size(); i-- > 0;) {
        const Node& n = nodes[i];
        if (n.leaf) {
            sig[i] = "leaf(" + n.name + ")";
            continue;
        }
        std::vector<std::string> kids;
        for (int c : n.children)
            kids.push_back(sig[c]);
        std::sort(kids.begin(), kids.end());
        std::string s = "node(" + n.name + ":";
        for (const auto& k : kids)
            s += k + ",";
        s += ")";
        sig[i] = s;
    }
    return nodes.empty() ? std::string() : sig[0];
}

size_t Corpus::count(Partition p) const {
    size_t n = 0;
    for (const auto& d : documents)
        n += d.partition == p;
    return n;
}

namespace {

void finalize_labels(Corpus& c) {
    std::set<std::string> labels;
    for (const auto& d : c.documents)
        labels.insert(d.label);
    c.labels.assign(labels.begin(), labels.end());
}

// Builds the tree from per-document parent paths. Every leaf is keyed by its
// label; two documents of one label must agree on the path.
LabelHierarchy build_hierarchy(const std::vector<Document>& docs) {
    LabelHierarchy h;
    h.nodes.push_back({"ROOT", -1, {}, false});
    std::map<std::vector<std::string>, int> by_path; // internal nodes
    by_path[{}] = 0;
    std::map<std::string, std::vector<std::string>> leaf_paths;

    auto intern = [&](const std::vector<std::string>& path) {
        auto it = by_path.find(path);
        if (it != by_path.end())
            return it->second;
        // create ancestors first
        int parent = 0;
        for (size_t k = 1; k <= path.size(); ++k) {
            std::vector<std::string> prefix(path.begin(), path.begin() + k);
            auto pit = by_path.find(prefix);
            if (pit == by_path.end()) {
                int id = static_cast<int>(h.nodes.size());
                h.nodes.push_back({prefix.back(), parent, {}, false});
                h.nodes[parent].children.push_back(id);
                by_path[prefix] = id;
                parent = id;
            } else {
                parent = pit->second;
            }
        }
        return parent;
    };

    for (const auto& d : docs) {
        auto it = leaf_paths.find(d.label);
        if (it != leaf_paths.end()) {
            if (it->second != d.parent_path)
                throw DataError("inconsistent parent_path for label '" + d.label + "'");
            continue;
        }
        leaf_paths[d.label] = d.parent_path;
        int parent = intern(d.parent_path);
        int id = static_cast<int>(h.nodes.size());
        h.nodes.push_back({d.label, parent, {}, true});
        h.nodes[parent].children.push_back(id);
    }
    // a leaf name that doubles as a category name breaks the label algebra
    std::set<std::string> seen;
    for (const auto& n : h.nodes)
        if (!seen.insert(n.name).second)
            throw DataError("hierarchy node name '" + n.name + "' is not unique");
    return h;
}

Document parse_document(const json& j, const std::string& origin, size_t lineno) {
    auto fail = [&](const std::string& msg) -> DataError {
        return DataError(origin + ": line " + std::to_string(lineno) + ": " + msg);
    };
    if (!j.is_object())
        throw fail("record is not an object");
    Document d;
    if (!j.contains("text") || !j["text"].is_string())
        throw fail("missing string field 'text'");
    if (!j.contains("label") || !j["label"].is_string())
        throw fail("missing string field 'label'");
    if (!j.contains("partition") || !j["partition"].is_string())
        throw fail("missing string field 'partition'");
    d.text = j["text"].get<std::string>();
    d.label = j["label"].get<std::string>();
    if (d.label.empty())
        throw fail("empty label");
    try {
        d.partition = parse_partition(j["partition"].get<std::string>());
    } catch (const DataError& e) {
        throw fail(e.what());
    }
    if (j.contains("parent_path")) {
        if (!j["parent_path"].is_array())
            throw fail("parent_path must be an array of strings");
        for (const auto& e : j["parent_path"]) {
            if (!e.is_string())
                throw fail("parent_path must be an array of strings");
            d.parent_path.push_back(e.get<std::string>());
        }
        d.has_parent_path = true;
    }
    return d;
}

Corpus parse_corpus(std::istream& in, const std::string& origin) {
    Corpus c;
    std::string line;
    size_t lineno = 0;
    size_t with_path = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(origin + ": line " + std::to_string(lineno) + ": " + e.what());
        }
        Document d = parse_document(j, origin, lineno);
        with_path += d.has_parent_path;
        c.documents.push_back(std::move(d));
    }
    if (with_path > 0 && with_path < c.documents.size())
        throw DataError(origin + ": parent_path present on some documents but not all");
    finalize_labels(c);
    if (with_path == c.documents.size() && !c.documents.empty())
        c.hierarchy = build_hierarchy(c.documents);
    return c;
}

} // namespace

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open corpus file: " + path);
    return parse_corpus(in, path);
}

Corpus corpus_from_string(const std::string& content, const std::string& origin) {
    std::istringstream in(content);
    return parse_corpus(in, origin);
}

std::string corpus_to_string(const Corpus& corpus) {
    std::string out;
    for (const auto& d : corpus.documents) {
        json j;
        j["text"] = d.text;
        j["label"] = d.label;
        j["partition"] = partition_name(d.partition);
        if (d.has_parent_path)
            j["parent_path"] = d.parent_path;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void write_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write corpus file: " + path);
    out << corpus_to_string(corpus);
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    enum class Kind { none, word, punct } kind = Kind::none;
    auto flush = [&]() {
        if (!cur.empty())
            out.push_back(cur);
        cur.clear();
    };
    for (unsigned char ch : text) {
        Kind k;
        if (std::isspace(ch))
            k = Kind::none;
        else if (std::isalnum(ch) || ch >= 0x80 || ch == '_')
            k = Kind::word;
        else
            k = Kind::punct;
        if (k != kind)
            flush();
        kind = k;
        if (k != Kind::none)
            cur.push_back(static_cast<char>(std::tolower(ch)));
    }
    flush();
    return out;
}

Vocabulary build_vocabulary(const Corpus& corpus, int min_count) {
    if (corpus.documents.empty())
        throw UsageError("build_vocabulary: empty corpus");
    std::map<std::string, long> counts;
    for (const auto& d : corpus.documents) {
        if (d.partition != Partition::train)
            continue;
        for (const auto& t : tokenize(d.text))
            ++counts[t];
    }
    std::vector<std::pair<long, std::string>> ranked;
    for (const auto& [tok, n] : counts)
        if (n >= min_count)
            ranked.emplace_back(-n, tok);
    std::sort(ranked.begin(), ranked.end());
    std::vector<std::string> toks;
    toks.reserve(ranked.size());
    for (auto& [n, tok] : ranked)
        toks.push_back(std::move(tok));
    return Vocabulary::from_tokens(std::move(toks));
}

Corpus generate_synthetic(const SynthSpec& spec) {
    if (spec.n_parents < 1 || spec.children_per_parent < 1 || spec.docs_per_leaf < 1 ||
        spec.tokens_per_doc < 1 || spec.parent_pool < 1 || spec.child_pool < 1)
        throw UsageError("generate_synthetic: all counts must be >= 1");
    if (spec.overlap < 0.0 || spec.overlap >= 1.0)
        throw UsageError("generate_synthetic: overlap must lie in [0,1)");

    Rng rng(spec.seed);
    Corpus c;
    for (int p = 0; p < spec.n_parents; ++p) {
        std::string parent = "topic" + std::to_string(p);
        for (int ch = 0; ch < spec.children_per_parent; ++ch) {
            std::string leaf = parent + "_sub" + std::to_string(ch);
            Rng leaf_rng = rng.derive("leaf", static_cast<uint64_t>(p) * 1000 + ch);

            int n = spec.docs_per_leaf;
            int n_val = n / 10;
            int n_test = n / 5;
            std::vector<Partition> parts(n, Partition::train);
            std::vector<int> order(n);
            for (int i = 0; i < n; ++i)
                order[i] = i;
            Rng part_rng = leaf_rng.derive("partition");
            part_rng.shuffle(order);
            for (int i = 0; i < n_val; ++i)
                parts[order[i]] = Partition::validation;
            for (int i = n_val; i < n_val + n_test; ++i)
                parts[order[i]] = Partition::test;

            Rng tok_rng = leaf_rng.derive("tokens");
            for (int i = 0; i < n; ++i) {
                std::string text;
                for (int t = 0; t < spec.tokens_per_doc; ++t) {
                    if (t)
                        text += ' ';
                    if (tok_rng.next_double() < spec.overlap) {
                        text += parent + "w" + std::to_string(tok_rng.below(spec.parent_pool));
                    } else {
                        text += leaf + "w" + std::to_string(tok_rng.below(spec.child_pool));
                    }
                }
                Document d;
                d.text = std::move(text);
                d.label = leaf;
                d.partition = parts[i];
                d.parent_path = {parent};
                d.has_parent_path = true;
                c.documents.push_back(std::move(d));
            }
        }
    }
    finalize_labels(c);
    c.hierarchy = build_hierarchy(c.documents);
    return c;
}

TokenizedCorpus tokenize_corpus(const Corpus& corpus, const Vocabulary& vocab) {
    std::vector<std::vector<int>> seqs;
    std::vector<std::string> labels;
    std::vector<Partition> parts;
    seqs.reserve(corpus.documents.size());
    for (const auto& d : corpus.documents) {
        std::vector<int> ids;
        for (const auto& t : tokenize(d.text))
            ids.push_back(vocab.lookup(t));
        seqs.push_back(std::move(ids));
        labels.push_back(d.label);
        parts.push_back(d.partition);
    }
    return assemble_tokenized(seqs, labels, parts);
}

TokenizedCorpus assemble_tokenized(const std::vector<std::vector<int>>& token_seqs,
                                   const std::vector<std::string>& doc_labels,
                                   const std::vector<Partition>& partitions) {
    TokenizedCorpus tc;
    std::set<std::string> labelset(doc_labels.begin(), doc_labels.end());
    tc.labels.assign(labelset.begin(), labelset.end());
    std::map<std::string, int> label_to_id;
    for (size_t i = 0; i < tc.labels.size(); ++i)
        label_to_id[tc.labels[i]] = static_cast<int>(i);
    tc.tokens = token_seqs;
    tc.partitions = partitions;
    tc.label_ids.reserve(doc_labels.size());
    tc.train_by_label.assign(tc.labels.size(), {});
    for (size_t i = 0; i < doc_labels.size(); ++i) {
        int id = label_to_id.at(doc_labels[i]);
        tc.label_ids.push_back(id);
        switch (partitions[i]) {
        case Partition::train:
            tc.train_by_label[id].push_back(static_cast<int>(i));
            break;
        case Partition::validation:
            tc.validation_docs.push_back(static_cast<int>(i));
            break;
        case Partition::test:
            tc.test_docs.push_back(static_cast<int>(i));
            break;
        }
    }
    return tc;
}

} // namespace dyncls
