// dyncls: metric-learning text classification with dynamic label sets.
// Subcommands: geometry-selftest, synth, train, dynamic, eval.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dyncls/model_io.hpp"
#include "dyncls/selftest.hpp"

using namespace dyncls;
using json = nlohmann::json;

namespace {

// Flat key=value configuration with command-line overrides. Every tunable has
// a documented default; unknown keys are rejected.
class Config {
public:
    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> kDefaults = {
            {"seed", "17"},
            {"vocab.min_count", "1"},
            {"encoder.embed_dim", "50"},
            {"encoder.hidden", "128"},
            {"encoder.output_dim", "16"},
            {"encoder.dropout", "0.5"},
            {"encoder.embedding_file", ""},
            {"episode.n_classes", "0"}, // 0 = full label set every episode
            {"episode.n_support", "4"},
            {"episode.n_query", "64"},
            {"episode.train_mean_iters", "5"},
            {"episode.eval_mean_iters", "100"},
            {"train.episodes", "10000"},
            {"train.lr", "0.001"},
            {"train.eval_interval", "250"},
            {"train.patience", "8"},
            {"finetune.episodes", "1000"},
            {"finetune.lr", "0.001"},
            {"finetune.eval_interval", "100"},
            {"finetune.patience", "8"},
            {"mlp.epochs", "100"},
            {"mlp.batch_size", "32"},
            {"mlp.lr", "0.001"},
            {"mlp.patience", "8"},
            {"mlp_finetune.epochs", "100"},
            {"mlp_finetune.batch_size", "32"},
            {"mlp_finetune.lr", "0.001"},
            {"mlp_finetune.patience", "8"},
            {"protocol.p", "0.3"},
            {"protocol.n_seeds", "5"},
            {"protocol.knn_k", "5"},
        };
        return kDefaults;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in)
            throw DataError("cannot open config file: " + path);
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#')
                continue;
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw DataError(path + ": line " + std::to_string(lineno) +
                                ": expected key = value");
            set(strip(s.substr(0, eq)), strip(s.substr(eq + 1)));
        }
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key))
            throw UsageError("unknown config key '" + key + "'");
        kv_[key] = value;
    }

    void set_override(const std::string& assignment) {
        auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw UsageError("--set expects key=value, got '" + assignment + "'");
        set(strip(assignment.substr(0, eq)), strip(assignment.substr(eq + 1)));
    }

    std::string get(const std::string& key) const {
        auto it = kv_.find(key);
        if (it != kv_.end())
            return it->second;
        return defaults().at(key);
    }
    int get_int(const std::string& key) const { return std::stoi(get(key)); }
    double get_double(const std::string& key) const { return std::stod(get(key)); }
    uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }

    std::vector<int> get_int_list(const std::string& key) const {
        std::vector<int> out;
        std::stringstream ss(get(key));
        std::string item;
        while (std::getline(ss, item, ','))
            if (!strip(item).empty())
                out.push_back(std::stoi(strip(item)));
        return out;
    }

    // canonical text of the effective configuration, for the model digest
    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : defaults()) {
            out += k;
            out += '=';
            out += get(k);
            out += '\n';
        }
        return out;
    }

private:
    static std::string strip(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos)
            return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    std::map<std::string, std::string> kv_;
};

EncoderInit encoder_init_from(const Config& cfg) {
    EncoderInit e;
    e.embed_dim = cfg.get_int("encoder.embed_dim");
    e.hidden.clear();
    for (int h : cfg.get_int_list("encoder.hidden"))
        e.hidden.push_back(h);
    e.output_dim = cfg.get_int("encoder.output_dim");
    e.dropout = cfg.get_double("encoder.dropout");
    std::string f = cfg.get("encoder.embedding_file");
    if (!f.empty())
        e.embedding_file = f;
    return e;
}

EpisodeConfig episode_from(const Config& cfg) {
    EpisodeConfig e;
    e.n_classes = cfg.get_int("episode.n_classes");
    e.n_support = cfg.get_int("episode.n_support");
    e.n_query = cfg.get_int("episode.n_query");
    e.train_mean_iters = cfg.get_int("episode.train_mean_iters");
    e.eval_mean_iters = cfg.get_int("episode.eval_mean_iters");
    return e;
}

TrainConfig train_from(const Config& cfg, const char* prefix) {
    std::string p(prefix);
    TrainConfig t;
    t.episodes = cfg.get_int(p + ".episodes");
    t.lr = cfg.get_double(p + ".lr");
    t.early.eval_interval = cfg.get_int(p + ".eval_interval");
    t.early.patience = cfg.get_int(p + ".patience");
    return t;
}

MlpTrainConfig mlp_from(const Config& cfg, const char* prefix) {
    std::string p(prefix);
    MlpTrainConfig m;
    m.epochs = cfg.get_int(p + ".epochs");
    m.batch_size = cfg.get_int(p + ".batch_size");
    m.lr = cfg.get_double(p + ".lr");
    m.patience = cfg.get_int(p + ".patience");
    return m;
}

ProtocolConfig protocol_from(const Config& cfg) {
    ProtocolConfig p;
    p.p_removed = cfg.get_double("protocol.p");
    p.n_seeds = cfg.get_int("protocol.n_seeds");
    p.knn_k = cfg.get_int("protocol.knn_k");
    p.min_count = cfg.get_int("vocab.min_count");
    p.encoder = encoder_init_from(cfg);
    p.episode = episode_from(cfg);
    p.pretrain = train_from(cfg, "train");
    p.finetune = train_from(cfg, "finetune");
    p.mlp_pretrain = mlp_from(cfg, "mlp");
    p.mlp_finetune = mlp_from(cfg, "mlp_finetune");
    return p;
}

uint64_t config_digest(const Config& cfg, ModelKind kind) {
    std::string text = cfg.canonical();
    text += "kind=";
    text += model_kind_name(kind);
    return fnv1a64(text);
}

int cmd_geometry_selftest(uint64_t seed, const std::string& report_path) {
    SelftestResult res = run_geometry_selftest(seed);
    std::fputs(res.report.c_str(), stdout);
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::binary);
        if (!out)
            throw DataError("cannot write report file: " + report_path);
        out << res.report;
    }
    return res.passed ? 0 : 4;
}

int cmd_synth(const SynthSpec& spec, const std::string& out_path) {
    Corpus corpus = generate_synthetic(spec);
    write_corpus(corpus, out_path);
    std::printf("wrote %zu documents, %zu labels to %s\n", corpus.documents.size(),
                corpus.labels.size(), out_path.c_str());
    return 0;
}

int cmd_train(const Config& cfg, const std::string& corpus_path, const std::string& kind_name,
              const std::string& out_path, const std::string& history_path) {
    ModelKind kind = parse_model_kind(kind_name);
    Corpus corpus = load_corpus(corpus_path);
    if (corpus.documents.empty())
        throw DataError(corpus_path + ": empty corpus");
    Vocabulary vocab = build_vocabulary(corpus, cfg.get_int("vocab.min_count"));
    TokenizedCorpus tc = tokenize_corpus(corpus, vocab);
    uint64_t seed = cfg.get_u64("seed");

    ModelFile mf;
    mf.kind = kind;
    mf.config_digest = config_digest(cfg, kind);
    TrainHistory history;
    std::string kname = model_kind_name(kind);
    Rng root(seed);
    Rng init_rng = root.derive("init-" + kname);
    EncoderParams enc = init_encoder(vocab, encoder_init_from(cfg), init_rng);
    if (kind == ModelKind::mlp) {
        Rng head_rng = root.derive("head-mlp");
        MlpModel model = init_mlp(std::move(enc), tc.labels, head_rng);
        MlpTrainConfig mcfg = mlp_from(cfg, "mlp");
        if (mcfg.epochs > 0)
            history = train_mlp(model, tc, mcfg, root.derive("train-mlp"));
        mf.mlp = std::move(model);
    } else {
        EpisodeConfig ecfg = episode_from(cfg);
        ecfg.metric = kind == ModelKind::hyp ? Metric::hyperbolic : Metric::euclidean;
        TrainConfig tcfg = train_from(cfg, "train");
        if (tcfg.episodes > 0)
            history = train_episodic(enc, tc, ecfg, tcfg, root.derive("train-" + kname));
        mf.encoder = std::move(enc);
    }
    save_model(mf, out_path);
    if (!history_path.empty())
        write_history(history, history_path);
    double final_loss = history.entries.empty() ? 0.0 : history.entries.back().loss;
    std::printf("trained %s on %s (%d steps, final loss %.4f), model -> %s\n", kname.c_str(),
                corpus_path.c_str(), static_cast<int>(history.entries.size()), final_loss,
                out_path.c_str());
    return 0;
}

int cmd_dynamic(const Config& cfg, const std::string& corpus_path, const std::string& outdir,
                const std::string& models_csv, const std::string& nfine_csv,
                const std::string& variants, int jobs) {
    Corpus corpus = load_corpus(corpus_path);
    ProtocolConfig base = protocol_from(cfg);
    GridSpec spec;
    {
        std::stringstream ss(models_csv);
        std::string item;
        while (std::getline(ss, item, ','))
            spec.kinds.push_back(parse_model_kind(item));
    }
    {
        std::stringstream ss(nfine_csv);
        std::string item;
        while (std::getline(ss, item, ','))
            spec.n_fines.push_back(std::stoi(item));
    }
    if (variants == "tuned") {
        spec.run_untuned = false;
    } else if (variants == "untuned") {
        spec.run_tuned = false;
    } else if (variants != "both") {
        throw UsageError("--variants expects tuned, untuned or both");
    }

    std::filesystem::create_directories(outdir);
    uint64_t seed = cfg.get_u64("seed");
    auto grid = run_protocol_grid(corpus, base, spec, seed, jobs);
    for (const auto& [cell, report] : grid) {
        std::string name = std::string("cell_") + model_kind_name(cell.kind) + "_nfine" +
                           std::to_string(cell.n_fine) + (cell.tuned ? "_tuned" : "_untuned") +
                           ".jsonl";
        write_report(report, outdir + "/" + name);
    }
    std::string table = summary_table_csv(grid);
    {
        std::ofstream out(outdir + "/summary.csv", std::ios::binary);
        if (!out)
            throw DataError("cannot write " + outdir + "/summary.csv");
        out << table;
    }
    std::fputs(table.c_str(), stdout);
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& corpus_path,
             const std::string& out_path) {
    ModelFile mf = load_model(model_path);
    Corpus corpus = load_corpus(corpus_path);
    const Vocabulary& vocab =
        mf.kind == ModelKind::mlp ? mf.mlp->encoder.vocab : mf.encoder.vocab;
    TokenizedCorpus tc = tokenize_corpus(corpus, vocab);
    if (tc.test_docs.empty())
        throw DataError(corpus_path + ": no test documents");

    std::vector<const std::vector<int>*> test_seqs;
    for (int d : tc.test_docs)
        test_seqs.push_back(&tc.tokens[d]);
    std::vector<std::string> pred;
    if (mf.kind == ModelKind::mlp) {
        auto ids = mlp_classify_batch(*mf.mlp, test_seqs, Exec::parallel);
        for (int id : ids)
            pred.push_back(mf.mlp->head_labels[id]);
    } else {
        Metric metric = mf.kind == ModelKind::hyp ? Metric::hyperbolic : Metric::euclidean;
        PrototypeSet protos = build_final_prototypes(mf.encoder, tc, metric, 100, Exec::parallel);
        auto ids = classify_batch(mf.encoder, protos, test_seqs, Exec::parallel);
        for (int id : ids)
            pred.push_back(tc.labels[id]);
    }
    long correct = 0;
    for (size_t i = 0; i < test_seqs.size(); ++i)
        correct += pred[i] == corpus.documents[tc.test_docs[i]].label;

    json j;
    j["model_kind"] = model_kind_name(mf.kind);
    char digest[32];
    std::snprintf(digest, sizeof(digest), "%016llx",
                  static_cast<unsigned long long>(mf.config_digest));
    j["config_digest"] = digest;
    j["n_test"] = tc.test_docs.size();
    j["overall_accuracy"] = static_cast<double>(correct) / static_cast<double>(test_seqs.size());
    std::string text = j.dump() + "\n";
    std::fputs(text.c_str(), stdout);
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary);
        if (!out)
            throw DataError("cannot write " + out_path);
        out << text;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"metric-learning text classification with dynamic label sets"};
    app.require_subcommand(1);

    Config cfg;
    std::string config_path;
    std::vector<std::string> overrides;
    uint64_t seed_flag = 0;
    bool seed_given = false;

    auto add_config_flags = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key=value configuration file");
        sub->add_option("--set", overrides, "override a config key, e.g. --set train.lr=0.01");
        sub->add_option("--seed", seed_flag, "master seed")->each([&](const std::string&) {
            seed_given = true;
        });
    };

    int rc = 0;

    auto* selftest = app.add_subcommand("geometry-selftest",
                                        "run the geometry and mean-solver invariant checks");
    std::string report_path;
    selftest->add_option("--report", report_path, "also write the report to this file");
    add_config_flags(selftest);

    auto* synth = app.add_subcommand("synth", "generate a synthetic hierarchical corpus");
    SynthSpec synth_spec;
    std::string synth_out;
    synth->add_option("--out", synth_out, "output corpus file")->required();
    synth->add_option("--parents", synth_spec.n_parents, "parent topics");
    synth->add_option("--children", synth_spec.children_per_parent, "leaf labels per parent");
    synth->add_option("--docs-per-leaf", synth_spec.docs_per_leaf, "documents per leaf");
    synth->add_option("--tokens-per-doc", synth_spec.tokens_per_doc, "tokens per document");
    synth->add_option("--parent-pool", synth_spec.parent_pool, "parent token pool size");
    synth->add_option("--child-pool", synth_spec.child_pool, "leaf token pool size");
    synth->add_option("--overlap", synth_spec.overlap, "parent-pool mixture weight in [0,1)");
    add_config_flags(synth);

    auto* train = app.add_subcommand("train", "train a model on a corpus");
    std::string train_corpus, train_kind = "euc", train_out, train_history;
    train->add_option("--corpus", train_corpus, "corpus file")->required();
    train->add_option("--model", train_kind, "model kind: euc, hyp or mlp");
    train->add_option("--out", train_out, "model output file")->required();
    train->add_option("--history", train_history, "write per-step training records here");
    add_config_flags(train);

    auto* dynamic = app.add_subcommand("dynamic", "run the dynamic-classification protocol grid");
    std::string dyn_corpus, dyn_outdir, dyn_models = "mlp,euc,hyp", dyn_nfine = "5,10,20,100",
                dyn_variants = "both";
    int dyn_jobs = 1;
    dynamic->add_option("--corpus", dyn_corpus, "corpus file")->required();
    dynamic->add_option("--outdir", dyn_outdir, "directory for per-cell reports")->required();
    dynamic->add_option("--models", dyn_models, "comma list of model kinds");
    dynamic->add_option("--n-fine", dyn_nfine, "comma list of per-label fine-tuning budgets");
    dynamic->add_option("--variants", dyn_variants, "tuned, untuned or both");
    dynamic->add_option("--jobs", dyn_jobs, "seeds to run in parallel");
    int dyn_seeds = 0;
    dynamic->add_option("--seeds", dyn_seeds,
                        "number of protocol seeds (overrides protocol.n_seeds)");
    add_config_flags(dynamic);

    auto* eval = app.add_subcommand("eval", "evaluate a saved model on a corpus test split");
    std::string eval_model, eval_corpus, eval_out;
    eval->add_option("--model", eval_model, "model file")->required();
    eval->add_option("--corpus", eval_corpus, "corpus file")->required();
    eval->add_option("--out", eval_out, "also write the JSON report here");
    add_config_flags(eval);

    try {
        app.parse(argc, argv);
        if (!config_path.empty())
            cfg.load_file(config_path);
        for (const auto& o : overrides)
            cfg.set_override(o);
        if (seed_given)
            cfg.set("seed", std::to_string(seed_flag));

        if (*selftest) {
            rc = cmd_geometry_selftest(cfg.get_u64("seed"), report_path);
        } else if (*synth) {
            synth_spec.seed = cfg.get_u64("seed");
            rc = cmd_synth(synth_spec, synth_out);
        } else if (*train) {
            rc = cmd_train(cfg, train_corpus, train_kind, train_out, train_history);
        } else if (*dynamic) {
            if (dyn_seeds > 0)
                cfg.set("protocol.n_seeds", std::to_string(dyn_seeds));
            rc = cmd_dynamic(cfg, dyn_corpus, dyn_outdir, dyn_models, dyn_nfine, dyn_variants,
                             dyn_jobs);
        } else if (*eval) {
            rc = cmd_eval(eval_model, eval_corpus, eval_out);
        }
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 4;
    }
    return rc;
}
