#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "adaptlab/adapters.hpp"
#include "adaptlab/params.hpp"
#include "json.hpp"

namespace adaptlab {

using Json = nlohmann::ordered_json;

// Hex SHA-256 digests.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string tensor_hash(const Tensor2D& t);  // over the raw double bytes
std::string file_hash(const std::filesystem::path& path);

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& j);
Json to_json(const AdapterConfig& config);
AdapterConfig adapter_config_from_json(const Json& j);

// The trainable half of an adaptation run: adapters plus the retrained
// input/output embeddings.
struct AdaptedWeights {
  AdapterSet adapters;
  Tensor2D token_embedding;
  Tensor2D unembedding;
};

// Base parameters with the adapted embeddings swapped in.
TransformerParams with_embeddings(const TransformerParams& base, const AdaptedWeights& adapted);

// A checkpoint is `<stem>.json` (manifest: config + tensor registry of name,
// shape, byte offset) next to `<stem>.bin` (little-endian float32). Values are
// rounded to float32 on save.
void save_model(const std::filesystem::path& manifest, const TransformerParams& params);
TransformerParams load_model(const std::filesystem::path& manifest);

void save_adapters(const std::filesystem::path& manifest, const ModelConfig& model, const AdaptedWeights& weights);
AdaptedWeights load_adapters(const std::filesystem::path& manifest, const ModelConfig& model);

// SHA-256 of the manifest bytes; the manifest carries the blob digest, so this
// identifies the full checkpoint.
std::string checkpoint_hash(const std::filesystem::path& manifest);

// Rounds every value through float32, matching what a save/load cycle yields.
void round_to_float32(Tensor2D& t);

}  // namespace adaptlab
