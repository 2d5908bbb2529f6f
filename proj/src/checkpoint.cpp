#include "adaptlab/checkpoint.hpp"

#include <openssl/sha.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "adaptlab/error.hpp"

namespace adaptlab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "adaptlab-checkpoint";
constexpr int kVersion = 1;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void append_f32(std::string& blob, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

double read_f32(const std::string& blob, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b)
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + b])) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

using Named = std::vector<std::pair<std::string, const Tensor2D*>>;

void write_checkpoint(const fs::path& manifest, Json header, const Named& tensors) {
  std::string blob;
  Json registry = Json::array();
  for (const auto& [name, t] : tensors) {
    registry.push_back({{"name", name}, {"shape", {t->rows(), t->cols()}}, {"offset", blob.size()}});
    for (double v : t->values()) append_f32(blob, v);
  }
  fs::path blob_path = manifest;
  blob_path.replace_extension(".bin");
  header["blob"] = blob_path.filename().string();
  header["blob_bytes"] = blob.size();
  header["blob_sha256"] = sha256_hex(blob);
  header["tensors"] = std::move(registry);
  write_file(blob_path, blob);
  write_file(manifest, header.dump(2) + "\n");
}

struct LoadedCheckpoint {
  Json header;
  std::string blob;
};

LoadedCheckpoint read_checkpoint(const fs::path& manifest, const char* kind) {
  if (!fs::exists(manifest)) throw MissingArtifact("checkpoint not found: " + manifest.string());
  LoadedCheckpoint c;
  try {
    c.header = Json::parse(read_file(manifest));
  } catch (const Json::parse_error& e) {
    throw MissingArtifact("unreadable checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  if (c.header.value("format", "") != kFormat || c.header.value("kind", "") != kind) {
    throw MissingArtifact(manifest.string() + " is not a " + kind + " checkpoint");
  }
  const fs::path blob_path = manifest.parent_path() / c.header.at("blob").get<std::string>();
  c.blob = read_file(blob_path);
  if (c.blob.size() != c.header.at("blob_bytes").get<std::size_t>() ||
      sha256_hex(c.blob) != c.header.at("blob_sha256").get<std::string>()) {
    throw MissingArtifact("checkpoint blob " + blob_path.string() + " does not match its manifest");
  }
  return c;
}

void fill_tensors(const LoadedCheckpoint& c, const std::vector<ParamRef>& targets, const fs::path& manifest) {
  std::map<std::string, const Json*> registry;
  for (const auto& entry : c.header.at("tensors")) registry[entry.at("name").get<std::string>()] = &entry;
  if (registry.size() != targets.size()) {
    throw MissingArtifact(manifest.string() + ": expected " + std::to_string(targets.size()) + " tensors, found " +
                          std::to_string(registry.size()));
  }
  for (const auto& ref : targets) {
    auto it = registry.find(ref.name);
    if (it == registry.end()) throw MissingArtifact(manifest.string() + ": missing tensor " + ref.name);
    const Json& entry = *it->second;
    const auto rows = entry.at("shape").at(0).get<std::size_t>();
    const auto cols = entry.at("shape").at(1).get<std::size_t>();
    if (rows != ref.tensor->rows() || cols != ref.tensor->cols()) {
      throw ShapeError(manifest.string() + ": tensor " + ref.name + " has shape [" + std::to_string(rows) + "x" +
                       std::to_string(cols) + "], expected " + ref.tensor->shape_string());
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    if (offset + 4 * ref.tensor->size() > c.blob.size()) {
      throw MissingArtifact(manifest.string() + ": tensor " + ref.name + " runs past the blob");
    }
    auto values = ref.tensor->values();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_f32(c.blob, offset + 4 * i);
  }
}

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(bytes.data(), bytes.size(), digest);
  std::ostringstream os;
  for (unsigned char b : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return os.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string tensor_hash(const Tensor2D& t) {
  std::string header = std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ":";
  std::string bytes(header);
  bytes.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  return sha256_hex(bytes);
}

std::string file_hash(const fs::path& path) { return sha256_hex(read_file(path)); }

Json to_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},         {"d_model", c.d_model},
              {"d_ffn", c.d_ffn},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"positional", to_string(c.positional)}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.positional = positional_kind_from_string(j.at("positional").get<std::string>());
  c.validate();
  return c;
}

Json to_json(const AdapterConfig& c) {
  return Json{{"mode", to_string(c.mode)},
              {"reduction_factor", c.reduction_factor},
              {"lora_rank", c.lora_rank},
              {"lora_scale", c.lora_scale},
              {"init_std", c.init_std}};
}

AdapterConfig adapter_config_from_json(const Json& j) {
  AdapterConfig c;
  c.mode = adapter_mode_from_string(j.at("mode").get<std::string>());
  c.reduction_factor = j.at("reduction_factor").get<std::size_t>();
  c.lora_rank = j.at("lora_rank").get<std::size_t>();
  c.lora_scale = j.at("lora_scale").get<double>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

TransformerParams with_embeddings(const TransformerParams& base, const AdaptedWeights& adapted) {
  if (!adapted.token_embedding.same_shape(base.token_embedding) ||
      !adapted.unembedding.same_shape(base.unembedding)) {
    throw ShapeError("with_embeddings: adapted embeddings do not match the base model");
  }
  TransformerParams out = base;
  out.token_embedding = adapted.token_embedding;
  out.unembedding = adapted.unembedding;
  return out;
}

void save_model(const fs::path& manifest, const TransformerParams& params) {
  Json header{{"format", kFormat}, {"version", kVersion}, {"kind", "model"}, {"config", to_json(params.config)}};
  write_checkpoint(manifest, std::move(header), params.named_tensors());
}

TransformerParams load_model(const fs::path& manifest) {
  LoadedCheckpoint c = read_checkpoint(manifest, "model");
  const ModelConfig config = model_config_from_json(c.header.at("config"));
  TransformerParams params = init_transformer(config, 0, 0.0);
  fill_tensors(c, params.parameters(), manifest);
  return params;
}

namespace {

constexpr const char* kAdaptedTokenName = "embeddings.token";
constexpr const char* kAdaptedUnembedName = "embeddings.lm_head";

}  // namespace

void save_adapters(const fs::path& manifest, const ModelConfig& model, const AdaptedWeights& weights) {
  Json header{{"format", kFormat},
              {"version", kVersion},
              {"kind", "adapters"},
              {"config", to_json(model)},
              {"adapter_config", to_json(weights.adapters.config)},
              {"trainable_embeddings", weights.adapters.trainable_embeddings}};
  Named tensors = weights.adapters.named_tensors();
  tensors.emplace_back(kAdaptedTokenName, &weights.token_embedding);
  tensors.emplace_back(kAdaptedUnembedName, &weights.unembedding);
  write_checkpoint(manifest, std::move(header), tensors);
}

AdaptedWeights load_adapters(const fs::path& manifest, const ModelConfig& model) {
  LoadedCheckpoint c = read_checkpoint(manifest, "adapters");
  const ModelConfig stored = model_config_from_json(c.header.at("config"));
  if (!(stored == model)) {
    throw ShapeError(manifest.string() + ": adapters were trained for a different model configuration");
  }
  AdaptedWeights w;
  w.adapters = init_adapters(model, adapter_config_from_json(c.header.at("adapter_config")), 0);
  w.adapters.trainable_embeddings = c.header.value("trainable_embeddings", true);
  w.token_embedding = Tensor2D(model.vocab_size, model.d_model);
  w.unembedding = Tensor2D(model.d_model, model.vocab_size);
  std::vector<ParamRef> refs = w.adapters.parameters();
  refs.push_back(ParamRef{kAdaptedTokenName, &w.token_embedding, true});
  refs.push_back(ParamRef{kAdaptedUnembedName, &w.unembedding, true});
  fill_tensors(c, refs, manifest);
  return w;
}

std::string checkpoint_hash(const fs::path& manifest) {
  if (!fs::exists(manifest)) throw MissingArtifact("checkpoint not found: " + manifest.string());
  return file_hash(manifest);
}

void round_to_float32(Tensor2D& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace adaptlab
