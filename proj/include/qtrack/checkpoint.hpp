#pragma once

// Checkpoint directory layout:
//   config.json  format version, hyperparams, vocab size, parameter manifest
//   vocab.txt    one token per line, line number = id
//   weights.bin  little-endian float32, manifest order, each tensor row-major

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "qtrack/model.hpp"
#include "qtrack/vocab.hpp"

namespace qtrack {

inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json hyperparams_to_json(const Hyperparams& hp) {
  return {{"heads", hp.heads},
          {"head_dim", hp.head_dim},
          {"embed_dim", hp.embed_dim},
          {"max_len", hp.max_len},
          {"dropout", hp.dropout},
          {"activation", to_string(hp.activation)},
          {"attention_scale", to_string(hp.attention_scale)},
          {"encoder_attention", hp.encoder_attention},
          {"enhancement", to_string(hp.enhancement)}};
}

inline Hyperparams hyperparams_from_json(const nlohmann::json& j) {
  Hyperparams hp;
  hp.heads = j.at("heads").get<std::size_t>();
  hp.head_dim = j.at("head_dim").get<std::size_t>();
  hp.embed_dim = j.at("embed_dim").get<std::size_t>();
  hp.max_len = j.at("max_len").get<std::size_t>();
  hp.dropout = j.at("dropout").get<double>();
  hp.activation = parse_activation(j.at("activation").get<std::string>());
  hp.attention_scale = parse_attention_scale(j.value("attention_scale", std::string("embed_dim")));
  hp.encoder_attention = j.value("encoder_attention", true);
  hp.enhancement = parse_enhancement(j.value("enhancement", std::string("full")));
  hp.validate();
  return hp;
}

struct Checkpoint {
  Vocabulary vocab;
  QueryTracker<float> model;
};

namespace detail {

inline void put_f32_le(std::ostream& os, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                         static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
  os.write(bytes, 4);
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const QueryTracker<float>& model,
                            const Vocabulary& vocab) {
  if (vocab.size() != model.vocab_size()) {
    throw Error("vocabulary size " + std::to_string(vocab.size()) + " does not match embedding rows " +
                std::to_string(model.vocab_size()));
  }
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  const auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    manifest.push_back({{"name", params.name(i)}, {"shape", params.value(i).shape().dims()}});
  }
  const nlohmann::json config = {{"format_version", kCheckpointFormatVersion},
                                 {"hyperparams", hyperparams_to_json(model.hyperparams())},
                                 {"vocab_size", vocab.size()},
                                 {"manifest", manifest}};
  {
    std::ofstream os(dir / "config.json");
    if (!os) throw Error("cannot write " + (dir / "config.json").string());
    os << config.dump(2) << '\n';
  }
  vocab.save((dir / "vocab.txt").string());
  std::ofstream os(dir / "weights.bin", std::ios::binary);
  if (!os) throw Error("cannot write " + (dir / "weights.bin").string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (float v : params.value(i).values()) detail::put_f32_le(os, v);
  }
  if (!os) throw Error("write failed: " + (dir / "weights.bin").string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream cfg(dir / "config.json");
  if (!cfg) throw Error("cannot read " + (dir / "config.json").string());
  nlohmann::json config;
  try {
    cfg >> config;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed config.json: " + std::string(e.what()));
  }
  if (config.value("format_version", 0) != kCheckpointFormatVersion) {
    throw Error("unsupported checkpoint format version in " + dir.string());
  }
  const Hyperparams hp = hyperparams_from_json(config.at("hyperparams"));
  Vocabulary vocab = Vocabulary::load((dir / "vocab.txt").string());
  if (config.at("vocab_size").get<std::size_t>() != vocab.size()) {
    throw Error("vocab.txt has " + std::to_string(vocab.size()) + " tokens but config declares " +
                std::to_string(config.at("vocab_size").get<std::size_t>()));
  }

  ParameterSet<float> params;
  std::size_t expected_floats = 0;
  for (const auto& entry : config.at("manifest")) {
    Shape shape(entry.at("shape").get<std::vector<std::size_t>>());
    expected_floats += shape.numel();
    params.add(entry.at("name").get<std::string>(), Tensor<float>(shape));
  }

  std::ifstream ws(dir / "weights.bin", std::ios::binary);
  if (!ws) throw Error("cannot read " + (dir / "weights.bin").string());
  std::ostringstream buf;
  buf << ws.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() != expected_floats * 4) {
    throw Error("weights.bin holds " + std::to_string(bytes.size()) + " bytes; manifest declares " +
                std::to_string(expected_floats * 4));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto& v : params.value(i).values()) {
      v = detail::get_f32_le(p);
      p += 4;
    }
  }
  QueryTracker<float> model(hp, std::move(params));
  if (model.vocab_size() != vocab.size()) throw Error("embedding rows do not match vocabulary size");
  return Checkpoint{std::move(vocab), std::move(model)};
}

/// Loads word vectors in word2vec text format ("word v1 ... vd" per line, optional
/// "count dim" header) into matching vocabulary rows. Returns the number of rows set.
inline std::size_t load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                              QueryTracker<float>& model) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read embeddings: " + path.string());
  const std::size_t d = model.hyperparams().embed_dim;
  Tensor<float>& table = model.params().value(model.embedding_index());
  std::string line;
  std::size_t loaded = 0, line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    std::vector<float> vec;
    float v;
    while (ls >> v) vec.push_back(v);
    if (line_no == 1 && vec.size() == 1) continue;  // header
    if (vec.size() != d) {
      throw Error("embeddings line " + std::to_string(line_no) + " has " + std::to_string(vec.size()) +
                  " values, expected " + std::to_string(d));
    }
    const int id = vocab.id(word);
    if (id == Vocabulary::kUnk && word != Vocabulary::kUnkToken) continue;
    std::copy(vec.begin(), vec.end(), table.data() + static_cast<std::size_t>(id) * d);
    ++loaded;
  }
  return loaded;
}

}  // namespace qtrack
