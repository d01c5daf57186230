#pragma once

#include <sstream>
#include <string>

#include "enat/checkpoint.hpp"
#include "enat/inference.hpp"
#include "enat/phrase_table.hpp"

namespace enat {

namespace detail {

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void put_model_config(Checkpoint& c, const ModelConfig& m) {
  c.metadata["model.vocab_size"] = std::to_string(m.vocab_size);
  c.metadata["model.layers"] = std::to_string(m.num_layers);
  c.metadata["model.d_model"] = std::to_string(m.d_model);
  c.metadata["model.heads"] = std::to_string(m.num_heads);
  c.metadata["model.d_ff"] = std::to_string(m.d_ff);
  c.metadata["model.dropout"] = format_real(m.dropout);
  c.metadata["model.max_positions"] = std::to_string(m.max_positions);
}

inline ModelConfig get_model_config(const Checkpoint& c) {
  ModelConfig m;
  m.vocab_size = std::stoul(c.meta("model.vocab_size"));
  m.num_layers = std::stoul(c.meta("model.layers"));
  m.d_model = std::stoul(c.meta("model.d_model"));
  m.num_heads = std::stoul(c.meta("model.heads"));
  m.d_ff = std::stoul(c.meta("model.d_ff"));
  m.dropout = std::stod(c.meta("model.dropout"));
  m.max_positions = std::stoul(c.meta("model.max_positions"));
  return m;
}

inline void expect_kind(const Checkpoint& c, const std::string& kind, const std::string& path) {
  const auto it = c.metadata.find("kind");
  if (it == c.metadata.end() || it->second != kind)
    throw std::runtime_error(path + ": not a " + kind + " checkpoint");
}

}  // namespace detail

struct TeacherModel {
  Transformer model;
  Vocabulary vocab;
};

inline void save_teacher(const std::string& path, const Transformer& model, const Vocabulary& vocab,
                         std::uint64_t seed) {
  Checkpoint c;
  c.metadata["kind"] = "teacher";
  c.metadata["seed"] = std::to_string(seed);
  c.metadata["vocab"] = vocab.serialize();
  detail::put_model_config(c, model.config());
  c.tensors = model.parameters();
  save_checkpoint(path, c);
}

inline TeacherModel load_teacher(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  detail::expect_kind(c, "teacher", path);
  TeacherModel t{Transformer(detail::get_model_config(c), DecoderKind::kAutoregressive, std::stoull(c.meta("seed"))),
                 Vocabulary::deserialize(c.meta("vocab"))};
  auto params = t.model.parameters();
  load_parameters(params, c);
  return t;
}

/// Student checkpoint: NAT parameters, W, the discriminator, the decoder
/// input method with its settings, and the lookup table if any.
inline void save_student(const std::string& path, const Student& s, std::uint64_t seed) {
  Checkpoint c;
  c.metadata["kind"] = "student";
  c.metadata["seed"] = std::to_string(seed);
  c.metadata["vocab"] = s.vocab.serialize();
  c.metadata["method"] = to_string(s.method);
  c.metadata["alpha"] = detail::format_real(s.alpha);
  c.metadata["tau"] = detail::format_real(s.tau);
  c.metadata["raw_kernel"] = s.raw_kernel ? "1" : "0";
  if (s.lookup_table) c.metadata["lookup_table"] = serialize_table(*s.lookup_table);
  detail::put_model_config(c, s.model.config());
  c.tensors = s.model.parameters();
  for (const auto& p : s.generator.parameters()) c.tensors.push_back(p);
  for (const auto& p : s.discriminator.parameters()) c.tensors.push_back(p);
  save_checkpoint(path, c);
}

inline Student load_student(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  detail::expect_kind(c, "student", path);
  const ModelConfig mc = detail::get_model_config(c);
  const auto seed = std::stoull(c.meta("seed"));
  std::optional<PhraseTable> table;
  if (c.metadata.count("lookup_table")) table = deserialize_table(c.meta("lookup_table"));
  Student s{Transformer(mc, DecoderKind::kNonAutoregressive, seed),
            Vocabulary::deserialize(c.meta("vocab")),
            parse_decoder_input_method(c.meta("method")),
            MappingGenerator::identity(mc.d_model),
            Discriminator::create(mc.d_model, mc.d_model, seed + 17),
            std::move(table),
            std::stod(c.meta("tau")),
            c.meta("raw_kernel") == "1",
            std::stod(c.meta("alpha"))};
  auto params = s.model.parameters();
  for (const auto& p : s.generator.parameters()) params.push_back(p);
  for (const auto& p : s.discriminator.parameters()) params.push_back(p);
  load_parameters(params, c);
  return s;
}

}  // namespace enat
