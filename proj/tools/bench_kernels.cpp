// Times the data-parallel kernels against their serial reference and verifies
// bit-identical outputs. Sizes mirror one pretraining episode on the synthetic
// benchmark corpus.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>

#include "dyncls/batch.hpp"
#include "dyncls/episodic.hpp"

using namespace dyncls;

namespace {

using clock_type = std::chrono::steady_clock;

double time_of(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    auto t0 = clock_type::now();
    for (int i = 0; i < reps; ++i)
        fn();
    auto t1 = clock_type::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

void row(const char* name, double serial, double parallel, bool identical) {
    std::printf("%-28s %10.3f ms %10.3f ms %8.2fx   %s\n", name, serial * 1e3, parallel * 1e3,
                serial / parallel, identical ? "bit-identical" : "MISMATCH");
}

} // namespace

int main(int argc, char** argv) {
    int reps = argc > 1 ? std::atoi(argv[1]) : 20;
    std::printf("threads: %d, reps: %d\n", omp_get_max_threads(), reps);
    std::printf("%-28s %13s %13s %9s\n", "kernel", "serial", "openmp", "speedup");

    Rng rng(12345);
    const int vocab_n = 500, dw = 50, d = 16, n_classes = 12, n_support = 4, n_query = 64;
    std::vector<std::string> toks;
    for (int i = 0; i < vocab_n; ++i)
        toks.push_back("w" + std::to_string(i));
    EncoderInit ecfg;
    ecfg.embed_dim = dw;
    ecfg.hidden = {128};
    ecfg.output_dim = d;
    ecfg.dropout = 0.5;
    Rng irng(7);
    EncoderParams params = init_encoder(Vocabulary::from_tokens(std::move(toks)), ecfg, irng);

    // one episode worth of sequences
    std::vector<std::vector<int>> seqs(n_classes * (n_support + n_query));
    for (auto& s : seqs) {
        int len = 20 + static_cast<int>(rng.below(20));
        for (int i = 0; i < len; ++i)
            s.push_back(static_cast<int>(rng.below(vocab_n)));
    }
    std::vector<const std::vector<int>*> ptrs;
    for (const auto& s : seqs)
        ptrs.push_back(&s);

    Rng drop(99);
    std::vector<ForwardTrace> traces_s, traces_p;
    std::vector<Vec> out_s, out_p;
    double es = time_of([&] { out_s = encode_batch(params, ptrs, Mode::train, drop, Exec::serial,
                                                   &traces_s); }, reps);
    double ep = time_of([&] { out_p = encode_batch(params, ptrs, Mode::train, drop, Exec::parallel,
                                                   &traces_p); }, reps);
    row("encode_batch", es, ep, out_s == out_p);

    std::vector<Vec> ograds(ptrs.size(), Vec(d));
    Rng grng(17);
    for (auto& g : ograds)
        for (double& x : g)
            x = grng.uniform(-1, 1);
    ParamGradients acc_s = ParamGradients::zeros_like(params);
    ParamGradients acc_p = ParamGradients::zeros_like(params);
    double bs = time_of([&] {
        acc_s.reset();
        backward_batch(params, traces_s, ograds, Exec::serial, acc_s);
    }, reps);
    double bp = time_of([&] {
        acc_p.reset();
        backward_batch(params, traces_p, ograds, Exec::parallel, acc_p);
    }, reps);
    row("backward_batch", bs, bp,
        acc_s.embedding == acc_p.embedding && acc_s.W == acc_p.W && acc_s.b == acc_p.b);

    // per-class Frechet means over lifted embeddings
    std::vector<int> label_ids(n_classes);
    std::vector<std::vector<Vec>> class_embs(n_classes);
    for (int c = 0; c < n_classes; ++c) {
        label_ids[c] = c;
        for (int j = 0; j < 40; ++j) {
            Vec e(d);
            for (double& x : e)
                x = grng.uniform(-1, 1);
            class_embs[c].push_back(std::move(e));
        }
    }
    MeanSolverConfig mc = MeanSolverConfig::evaluation();
    PrototypeSet proto_s, proto_p;
    double ps = time_of([&] {
        proto_s = compute_prototypes(label_ids, class_embs, Metric::hyperbolic, mc, Exec::serial);
    }, reps);
    double pp = time_of([&] {
        proto_p = compute_prototypes(label_ids, class_embs, Metric::hyperbolic, mc, Exec::parallel);
    }, reps);
    row("prototype means (hyp)", ps, pp, proto_s.prototypes == proto_p.prototypes);

    std::vector<Vec> queries(768, Vec(d));
    for (auto& q : queries)
        for (double& x : q)
            x = grng.uniform(-1, 1);
    std::vector<Vec> dm_s, dm_p;
    double ds = time_of([&] { dm_s = sqdist_matrix(proto_s, queries, Exec::serial); }, reps);
    double dp = time_of([&] { dm_p = sqdist_matrix(proto_s, queries, Exec::parallel); }, reps);
    row("sqdist_matrix (hyp)", ds, dp, dm_s == dm_p);

    bool all_ok = out_s == out_p && acc_s.W == acc_p.W &&
                  proto_s.prototypes == proto_p.prototypes && dm_s == dm_p;
    return all_ok ? 0 : 1;
}
