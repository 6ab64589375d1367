#pragma once

#include <string>

#include "dyncls/protocol.hpp"

namespace dyncls {

// Versioned little-endian binary model layout with an embedded digest of the
// configuration that produced it, so reuse across stages can detect drift.
struct ModelFile {
    ModelKind kind = ModelKind::euc;
    uint64_t config_digest = 0;
    EncoderParams encoder;       // euc / hyp
    std::optional<MlpModel> mlp; // mlp (owns its encoder)
};

void save_model(const ModelFile& model, const std::string& path);
ModelFile load_model(const std::string& path);

} // namespace dyncls
