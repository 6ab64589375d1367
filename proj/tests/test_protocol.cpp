#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "dyncls/protocol.hpp"
#include "testutil.hpp"

using namespace dyncls;
using testutil::close_rel;

namespace {

Corpus small_synth(uint64_t seed = 11) {
    SynthSpec spec;
    spec.n_parents = 2;
    spec.children_per_parent = 3;
    spec.docs_per_leaf = 30;
    spec.tokens_per_doc = 10;
    spec.parent_pool = 12;
    spec.child_pool = 8;
    spec.overlap = 0.3;
    spec.seed = seed;
    return generate_synthetic(spec);
}

// the fixture tree: two parents, three leaf children each
LabelHierarchy two_parent_tree() {
    return *small_synth().hierarchy;
}

ProtocolConfig fast_config() {
    ProtocolConfig cfg;
    cfg.encoder.embed_dim = 12;
    cfg.encoder.hidden = {16};
    cfg.encoder.output_dim = 6;
    cfg.encoder.dropout = 0.1;
    cfg.episode.n_support = 2;
    cfg.episode.n_query = 4;
    cfg.episode.eval_mean_iters = 100;
    cfg.pretrain.episodes = 120;
    cfg.pretrain.early.eval_interval = 60;
    cfg.pretrain.early.patience = 4;
    cfg.finetune.episodes = 60;
    cfg.finetune.early.eval_interval = 30;
    cfg.finetune.early.patience = 4;
    cfg.mlp_pretrain.epochs = 12;
    cfg.mlp_pretrain.patience = 6;
    cfg.mlp_finetune.epochs = 12;
    cfg.mlp_finetune.patience = 6;
    cfg.n_seeds = 1;
    cfg.n_fine = 5;
    return cfg;
}

} // namespace

TEST_CASE("collapse labels") {
    auto tree = two_parent_tree();
    SUBCASE("collapsing groups relabels whole sibling sets") {
        Rng rng(3);
        auto d = collapse_labels(tree, 0.5, rng);
        // one parent group = 3 of 6 leaves = exactly half
        CHECK(d.introduced.size() == 3);
        CHECK(d.new_labels.size() == 6);
        CHECK(d.old_labels.size() == 4); // 3 surviving leaves + 1 parent
        // all introduced leaves share one parent and map to it
        std::set<std::string> parents;
        for (const auto& leaf : d.introduced)
            parents.insert(*d.relabel.at(leaf));
        CHECK(parents.size() == 1);
        // label-set algebra
        for (const auto& l : d.new_labels) {
            bool is_introduced =
                std::find(d.introduced.begin(), d.introduced.end(), l) != d.introduced.end();
            bool in_old =
                std::find(d.old_labels.begin(), d.old_labels.end(), l) != d.old_labels.end();
            CHECK(is_introduced == !in_old);
            if (in_old)
                CHECK(*d.relabel.at(l) == l); // identity on surviving labels
        }
    }
    SUBCASE("p of zero is the identity") {
        Rng rng(5);
        auto d = collapse_labels(tree, 0.0, rng);
        CHECK(d.introduced.empty());
        CHECK(d.old_labels == d.new_labels);
    }
    SUBCASE("fixed seed reproduces the dynamics") {
        Rng r1(7), r2(7);
        auto a = collapse_labels(tree, 0.4, r1);
        auto b = collapse_labels(tree, 0.4, r2);
        CHECK(a.old_labels == b.old_labels);
        CHECK(a.introduced == b.introduced);
    }
    SUBCASE("flat hierarchy is rejected") {
        LabelHierarchy flat;
        flat.nodes.push_back({"ROOT", -1, {1}, false});
        flat.nodes.push_back({"only", 0, {}, true});
        Rng rng(9);
        CHECK_THROWS_AS(collapse_labels(flat, 0.3, rng), UsageError);
    }
}

TEST_CASE("remove labels") {
    std::vector<std::string> labels;
    for (int i = 0; i < 10; ++i)
        labels.push_back("l" + std::to_string(i));
    SUBCASE("p 0.3 of ten removes three") {
        Rng rng(11);
        auto d = remove_labels(labels, 0.3, rng);
        CHECK(d.introduced.size() == 3);
        CHECK(d.old_labels.size() == 7);
        CHECK(d.new_labels.size() == 10);
        for (const auto& l : d.introduced) {
            CHECK(!d.relabel.at(l).has_value());
            CHECK(std::find(d.old_labels.begin(), d.old_labels.end(), l) == d.old_labels.end());
        }
    }
    SUBCASE("p of zero is the identity") {
        Rng rng(13);
        auto d = remove_labels(labels, 0.0, rng);
        CHECK(d.introduced.empty());
        CHECK(d.old_labels == d.new_labels);
    }
    SUBCASE("removing everything is rejected") {
        Rng rng(15);
        CHECK_THROWS_AS(remove_labels({"a", "b"}, 0.9, rng), UsageError);
    }
}

TEST_CASE("protocol split") {
    auto corpus = small_synth();
    Rng dyn_rng(17);
    auto dynamics = collapse_labels(*corpus.hierarchy, 0.4, dyn_rng);
    SUBCASE("halves, relabeling, and untouched test partition") {
        Rng rng(19);
        auto staged = make_protocol_split(corpus, dynamics, 5, rng);
        size_t n_train = corpus.count(Partition::train);
        // collapse drops nothing, so the halves partition the train docs
        CHECK(staged.pretrain_train.size() == (n_train + 1) / 2);
        CHECK(staged.test_docs.size() == corpus.count(Partition::test));
        CHECK(staged.finetune.size() == 6 * 5);
        CHECK(staged.short_labels.empty());
        // pretraining never sees an introduced label
        std::set<std::string> introduced(dynamics.introduced.begin(), dynamics.introduced.end());
        std::set<std::string> old_set(dynamics.old_labels.begin(), dynamics.old_labels.end());
        for (const auto& sd : staged.pretrain_train) {
            CHECK(introduced.count(sd.label) == 0);
            CHECK(old_set.count(sd.label) == 1);
        }
    }
    SUBCASE("identity dynamics keeps the label sets equal") {
        Rng rng(23);
        auto id = identity_dynamics(corpus.labels);
        auto staged = make_protocol_split(corpus, id, 3, rng);
        std::set<std::string> pre_labels, fine_labels;
        for (const auto& sd : staged.pretrain_train)
            pre_labels.insert(sd.label);
        for (const auto& sd : staged.finetune)
            fine_labels.insert(sd.label);
        CHECK(pre_labels == fine_labels);
    }
    SUBCASE("fixed seed reproduces the split; budgets nest") {
        Rng r1(29), r2(29), r3(29);
        auto a = make_protocol_split(corpus, dynamics, 4, r1);
        auto b = make_protocol_split(corpus, dynamics, 4, r2);
        CHECK(a.pretrain_train.size() == b.pretrain_train.size());
        for (size_t i = 0; i < a.finetune.size(); ++i)
            CHECK(a.finetune[i].doc == b.finetune[i].doc);
        auto big = make_protocol_split(corpus, dynamics, 9, r3);
        std::set<int> small_docs, big_docs;
        for (const auto& sd : a.finetune)
            small_docs.insert(sd.doc);
        for (const auto& sd : big.finetune)
            big_docs.insert(sd.doc);
        for (int d : small_docs)
            CHECK(big_docs.count(d) == 1);
    }
    SUBCASE("oversized n_fine takes everything and is flagged") {
        Rng rng(31);
        auto staged = make_protocol_split(corpus, dynamics, 10000, rng);
        CHECK(staged.short_labels.size() == 6);
    }
    SUBCASE("removal drops the removed labels' pretraining docs") {
        Corpus flat = corpus;
        flat.hierarchy.reset();
        Rng rr(37);
        auto rd = remove_labels(flat.labels, 0.3, rr);
        Rng rng(41);
        auto staged = make_protocol_split(flat, rd, 3, rng);
        std::set<std::string> old_set(rd.old_labels.begin(), rd.old_labels.end());
        for (const auto& sd : staged.pretrain_train)
            CHECK(old_set.count(sd.label) == 1);
        CHECK(staged.pretrain_train.size() < (corpus.count(Partition::train) + 1) / 2);
    }
}

TEST_CASE("knn") {
    std::vector<Vec> refs{{0, 0}, {1, 0}, {1.1, 0}, {5, 5}};
    std::vector<int> labels{0, 1, 1, 2};
    SUBCASE("k of one returns the exact match") {
        CHECK(knn_classify(refs, labels, {0, 0}, 1) == 0);
        CHECK(knn_classify(refs, labels, {5, 5}, 1) == 2);
    }
    SUBCASE("majority among three nearest") {
        CHECK(knn_classify(refs, labels, {1.0, 0.1}, 3) == 1);
    }
    SUBCASE("k larger than the reference set clamps") {
        CHECK(knn_classify(refs, labels, {5, 5}, 100) == knn_classify(refs, labels, {5, 5}, 4));
    }
    SUBCASE("vote tie breaks by summed inverse distance") {
        std::vector<Vec> r2{{0, 0}, {2, 0}};
        std::vector<int> l2{7, 3};
        CHECK(knn_classify(r2, l2, {0.5, 0}, 2) == 7);
        CHECK(knn_classify(r2, l2, {1.5, 0}, 2) == 3);
    }
}

TEST_CASE("mlp training") {
    auto corpus = small_synth(43);
    auto vocab = build_vocabulary(corpus, 1);
    auto tc = tokenize_corpus(corpus, vocab);
    EncoderInit ecfg;
    ecfg.embed_dim = 12;
    ecfg.hidden = {16};
    ecfg.output_dim = 6;
    ecfg.dropout = 0.1;
    Rng ir(47);
    auto enc = init_encoder(vocab, ecfg, ir);
    Rng hr(53);
    auto model = init_mlp(std::move(enc), tc.labels, hr);

    MlpTrainConfig cfg;
    cfg.epochs = 120;
    cfg.patience = 40; // validation sits flat for ~25 epochs before the jump
    SUBCASE("separable corpus clears 0.9 validation accuracy") {
        auto h = train_mlp(model, tc, cfg, Rng(59));
        REQUIRE(!h.entries.empty());
        double best = 0.0;
        for (const auto& e : h.entries)
            if (e.val_accuracy)
                best = std::max(best, *e.val_accuracy);
        CHECK(best > 0.9);
    }
    SUBCASE("single-label corpus fits trivially") {
        std::vector<std::vector<int>> seqs{{0, 1}, {1, 2}, {2, 3}};
        std::vector<std::string> labels{"only", "only", "only"};
        std::vector<Partition> parts(3, Partition::train);
        auto tiny = assemble_tokenized(seqs, labels, parts);
        Rng hr2(61);
        auto m2 = init_mlp(model.encoder, tiny.labels, hr2);
        MlpTrainConfig c2;
        c2.epochs = 2;
        train_mlp(m2, tiny, c2, Rng(67));
        std::vector<const std::vector<int>*> ptrs{&seqs[0], &seqs[1], &seqs[2]};
        auto pred = mlp_classify_batch(m2, ptrs, Exec::serial);
        for (int p : pred)
            CHECK(p == 0);
    }
    SUBCASE("head and encoder gradients match finite differences") {
        std::vector<std::vector<int>> seqs{{0, 1, 2}, {3, 4}, {5, 1}};
        std::vector<int> truth{0, 2, 4};
        auto loss_of = [&](const MlpModel& m) {
            std::vector<const std::vector<int>*> ptrs;
            for (const auto& s : seqs)
                ptrs.push_back(&s);
            Rng r(0);
            auto embs = encode_batch(m.encoder, ptrs, Mode::eval, r, Exec::serial);
            double total = 0.0;
            for (size_t i = 0; i < embs.size(); ++i) {
                Vec lg(m.head.out);
                for (int k = 0; k < m.head.out; ++k) {
                    const double* row = m.head.W.data() + static_cast<size_t>(k) * m.head.in;
                    double s = m.head.b[k];
                    for (int j = 0; j < m.head.in; ++j)
                        s += row[j] * embs[i][j];
                    lg[k] = s;
                }
                double mx = lg[0];
                for (double v : lg)
                    mx = std::max(mx, v);
                double z = 0.0;
                for (double v : lg)
                    z += std::exp(v - mx);
                total += mx + std::log(z) - lg[truth[i]];
            }
            return total / 3.0;
        };
        // analytic: mirror one batch of the training loop, dropout off
        MlpModel m = model;
        m.encoder.dropout_rate = 0.0;
        std::vector<const std::vector<int>*> ptrs;
        for (const auto& s : seqs)
            ptrs.push_back(&s);
        Rng r(0);
        std::vector<ForwardTrace> traces;
        auto embs = encode_batch(m.encoder, ptrs, Mode::train, r, Exec::serial, &traces);
        Vec hgw(m.head.W.size(), 0.0), hgb(m.head.b.size(), 0.0);
        std::vector<Vec> demb(3, Vec(m.head.in, 0.0));
        for (size_t i = 0; i < embs.size(); ++i) {
            Vec lg(m.head.out);
            for (int k = 0; k < m.head.out; ++k) {
                const double* row = m.head.W.data() + static_cast<size_t>(k) * m.head.in;
                double s = m.head.b[k];
                for (int j = 0; j < m.head.in; ++j)
                    s += row[j] * embs[i][j];
                lg[k] = s;
            }
            double mx = lg[0];
            for (double v : lg)
                mx = std::max(mx, v);
            double z = 0.0;
            for (double v : lg)
                z += std::exp(v - mx);
            for (int k = 0; k < m.head.out; ++k) {
                double sigma = std::exp(lg[k] - mx) / z;
                double dl = (sigma - (k == truth[i] ? 1.0 : 0.0)) / 3.0;
                double* grow = hgw.data() + static_cast<size_t>(k) * m.head.in;
                const double* wrow = m.head.W.data() + static_cast<size_t>(k) * m.head.in;
                for (int j = 0; j < m.head.in; ++j) {
                    grow[j] += dl * embs[i][j];
                    demb[i][j] += dl * wrow[j];
                }
                hgb[k] += dl;
            }
        }
        auto acc = ParamGradients::zeros_like(m.encoder);
        backward_batch(m.encoder, traces, demb, Exec::serial, acc);

        const double h = 1e-5;
        auto fd = [&](double* slot) {
            double orig = *slot;
            *slot = orig + h;
            double hi = loss_of(m);
            *slot = orig - h;
            double lo = loss_of(m);
            *slot = orig;
            return (hi - lo) / (2 * h);
        };
        for (size_t i = 0; i < m.head.W.size(); ++i)
            CHECK(close_rel(hgw[i], fd(&m.head.W[i]), 1e-4, 1e-7));
        for (size_t i = 0; i < m.head.b.size(); ++i)
            CHECK(close_rel(hgb[i], fd(&m.head.b[i]), 1e-4, 1e-7));
        for (size_t i = 0; i < m.encoder.embedding.data.size(); i += 7)
            CHECK(close_rel(acc.embedding[i], fd(&m.encoder.embedding.data[i]), 1e-4, 1e-7));
        for (size_t l = 0; l < m.encoder.layers.size(); ++l)
            for (size_t i = 0; i < m.encoder.layers[l].W.size(); i += 5)
                CHECK(close_rel(acc.W[l][i], fd(&m.encoder.layers[l].W[i]), 1e-4, 1e-7));
    }
}

TEST_CASE("run protocol single seed") {
    auto corpus = small_synth(71);
    auto cfg = fast_config();
    SUBCASE("tuned euclidean run produces a sane report") {
        cfg.kind = ModelKind::euc;
        auto rep = run_protocol(corpus, cfg, 1234);
        REQUIRE(rep.per_seed.size() == 1);
        CHECK(rep.overall_std == 0.0); // single seed
        CHECK(rep.per_seed[0].overall >= 0.0);
        CHECK(rep.per_seed[0].overall <= 1.0);
        CHECK(rep.per_seed[0].n_test == static_cast<int>(corpus.count(Partition::test)));
        // collapse always introduces labels here, so new-only is present
        CHECK(rep.per_seed[0].new_only.has_value());
        CHECK(rep.new_only_mean.has_value());
    }
    SUBCASE("un-tuned run leaves parameters bit-identical") {
        cfg.kind = ModelKind::hyp;
        cfg.tuned = false;
        auto rep = run_protocol(corpus, cfg, 99);
        REQUIRE(rep.per_seed.size() == 1);
        REQUIRE(rep.per_seed[0].untuned_params_unchanged.has_value());
        CHECK(*rep.per_seed[0].untuned_params_unchanged);
    }
    SUBCASE("deterministic: same master seed, same report") {
        cfg.kind = ModelKind::mlp;
        auto a = run_protocol(corpus, cfg, 7);
        auto b = run_protocol(corpus, cfg, 7);
        CHECK(report_to_jsonl(a) == report_to_jsonl(b));
    }
}

TEST_CASE("grid run matches independent per-cell runs and aggregates correctly") {
    auto corpus = small_synth(73);
    auto cfg = fast_config();
    cfg.n_seeds = 2;
    GridSpec spec;
    spec.kinds = {ModelKind::euc};
    spec.n_fines = {5};
    spec.run_tuned = true;
    spec.run_untuned = true;
    auto grid = run_protocol_grid(corpus, cfg, spec, 4321, 2);
    REQUIRE(grid.size() == 2);

    cfg.kind = ModelKind::euc;
    cfg.tuned = true;
    auto solo = run_protocol(corpus, cfg, 4321);
    auto& cell = grid.at(GridCell{ModelKind::euc, 5, true});
    CHECK(report_to_jsonl(cell) == report_to_jsonl(solo));

    // aggregate recomputation: mean/std from the per-seed values
    double mean = 0.0;
    for (const auto& s : cell.per_seed)
        mean += s.overall;
    mean /= static_cast<double>(cell.per_seed.size());
    double var = 0.0;
    for (const auto& s : cell.per_seed)
        var += (s.overall - mean) * (s.overall - mean);
    double stddev = std::sqrt(var / static_cast<double>(cell.per_seed.size()));
    CHECK(format_mean_std(mean, stddev) == format_mean_std(cell.overall_mean, cell.overall_std));

    auto csv = summary_table_csv(grid);
    CHECK(csv.find("model,tuned,n_fine=5") == 0);
    CHECK(csv.find("euc,tuned," + format_mean_std(cell.overall_mean, cell.overall_std)) !=
          std::string::npos);
}
