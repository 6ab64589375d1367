#include "dyncls/model_io.hpp"

#include <cstring>
#include <fstream>

namespace dyncls {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'L', 'S'};
constexpr uint32_t kVersion = 1;

struct Writer {
    std::ofstream out;
    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out)
            throw DataError("cannot write model file: " + path);
    }
    void bytes(const void* p, size_t n) { out.write(static_cast<const char*>(p), n); }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void f64v(const Vec& v) {
        u64(v.size());
        bytes(v.data(), v.size() * sizeof(double));
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream in;
    std::string path;
    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in)
            throw DataError("cannot open model file: " + p);
    }
    void bytes(void* p, size_t n) {
        in.read(static_cast<char*>(p), n);
        if (!in)
            throw DataError("model file " + path + ": truncated");
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint32_t v;
        bytes(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        bytes(&v, 8);
        return v;
    }
    Vec f64v() {
        uint64_t n = u64();
        if (n > (1ull << 32))
            throw DataError("model file " + path + ": implausible tensor size");
        Vec v(n);
        bytes(v.data(), n * sizeof(double));
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
};

void write_encoder(Writer& w, const EncoderParams& p) {
    w.u64(p.vocab.tokens.size());
    for (const auto& t : p.vocab.tokens)
        w.str(t);
    w.u32(static_cast<uint32_t>(p.embedding.rows));
    w.u32(static_cast<uint32_t>(p.embedding.cols));
    w.u8(p.embedding.trainable ? 1 : 0);
    w.f64v(p.embedding.data);
    w.bytes(&p.dropout_rate, sizeof(double));
    w.u32(static_cast<uint32_t>(p.layers.size()));
    for (const auto& l : p.layers) {
        w.u32(static_cast<uint32_t>(l.in));
        w.u32(static_cast<uint32_t>(l.out));
        w.f64v(l.W);
        w.f64v(l.b);
    }
    w.u64(p.adam_steps);
    w.u64(p.version);
    if (p.embedding.trainable) {
        w.f64v(p.m_embedding);
        w.f64v(p.v_embedding);
    }
    for (size_t i = 0; i < p.layers.size(); ++i) {
        w.f64v(p.m_W[i]);
        w.f64v(p.v_W[i]);
        w.f64v(p.m_b[i]);
        w.f64v(p.v_b[i]);
    }
}

EncoderParams read_encoder(Reader& r) {
    EncoderParams p;
    uint64_t n_tokens = r.u64();
    std::vector<std::string> toks(n_tokens);
    for (auto& t : toks)
        t = r.str();
    // tokens were stored with UNK already included
    if (toks.empty())
        throw DataError("model file " + r.path + ": empty vocabulary");
    p.vocab.tokens = std::move(toks);
    for (size_t i = 0; i < p.vocab.tokens.size(); ++i)
        p.vocab.index.emplace(p.vocab.tokens[i], static_cast<int>(i));
    p.vocab.unk_index = static_cast<int>(p.vocab.tokens.size()) - 1;
    p.embedding.rows = static_cast<int>(r.u32());
    p.embedding.cols = static_cast<int>(r.u32());
    p.embedding.trainable = r.u8() != 0;
    p.embedding.data = r.f64v();
    r.bytes(&p.dropout_rate, sizeof(double));
    uint32_t n_layers = r.u32();
    for (uint32_t i = 0; i < n_layers; ++i) {
        AffineLayer l;
        l.in = static_cast<int>(r.u32());
        l.out = static_cast<int>(r.u32());
        l.W = r.f64v();
        l.b = r.f64v();
        if (l.W.size() != static_cast<size_t>(l.in) * l.out ||
            l.b.size() != static_cast<size_t>(l.out))
            throw DataError("model file " + r.path + ": layer shape mismatch");
        p.layers.push_back(std::move(l));
    }
    p.adam_steps = r.u64();
    p.version = r.u64();
    if (p.embedding.trainable) {
        p.m_embedding = r.f64v();
        p.v_embedding = r.f64v();
    }
    for (uint32_t i = 0; i < n_layers; ++i) {
        p.m_W.push_back(r.f64v());
        p.v_W.push_back(r.f64v());
        p.m_b.push_back(r.f64v());
        p.v_b.push_back(r.f64v());
    }
    return p;
}

} // namespace

void save_model(const ModelFile& model, const std::string& path) {
    Writer w(path);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u8(static_cast<uint8_t>(model.kind));
    w.u64(model.config_digest);
    if (model.kind == ModelKind::mlp) {
        if (!model.mlp)
            throw UsageError("save_model: mlp kind without an mlp model");
        write_encoder(w, model.mlp->encoder);
        const MlpModel& m = *model.mlp;
        w.u32(static_cast<uint32_t>(m.head_labels.size()));
        for (const auto& l : m.head_labels)
            w.str(l);
        w.u32(static_cast<uint32_t>(m.head.in));
        w.u32(static_cast<uint32_t>(m.head.out));
        w.f64v(m.head.W);
        w.f64v(m.head.b);
        w.u64(m.head_steps);
        w.f64v(m.m_hW);
        w.f64v(m.v_hW);
        w.f64v(m.m_hb);
        w.f64v(m.v_hb);
    } else {
        write_encoder(w, model.encoder);
    }
    if (!w.out)
        throw DataError("failed writing model file: " + path);
}

ModelFile load_model(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("model file " + path + ": bad magic");
    uint32_t version = r.u32();
    if (version != kVersion)
        throw DataError("model file " + path + ": unsupported version " +
                        std::to_string(version));
    ModelFile m;
    uint8_t kind = r.u8();
    if (kind > 2)
        throw DataError("model file " + path + ": unknown model kind");
    m.kind = static_cast<ModelKind>(kind);
    m.config_digest = r.u64();
    if (m.kind == ModelKind::mlp) {
        MlpModel mlp;
        mlp.encoder = read_encoder(r);
        uint32_t n_labels = r.u32();
        for (uint32_t i = 0; i < n_labels; ++i)
            mlp.head_labels.push_back(r.str());
        mlp.head.in = static_cast<int>(r.u32());
        mlp.head.out = static_cast<int>(r.u32());
        mlp.head.W = r.f64v();
        mlp.head.b = r.f64v();
        mlp.head_steps = r.u64();
        mlp.m_hW = r.f64v();
        mlp.v_hW = r.f64v();
        mlp.m_hb = r.f64v();
        mlp.v_hb = r.f64v();
        m.mlp = std::move(mlp);
    } else {
        m.encoder = read_encoder(r);
    }
    return m;
}

} // namespace dyncls
