// SPDX-License-Identifier: Apache-2.0
#include "kmae/model.hpp"

namespace kmae {

namespace {

std::string domain_name(InputDomain d) {
  return d == InputDomain::kspace ? "kspace" : "image";
}
InputDomain domain_from(const std::string& s) {
  if (s == "kspace") return InputDomain::kspace;
  if (s == "image") return InputDomain::image;
  throw ConfigError("model: unknown input_domain '" + s + "'");
}
std::string scheme_name(TokenScheme s) {
  return s == TokenScheme::kline ? "kline" : "image_patch";
}
TokenScheme scheme_from(const std::string& s) {
  if (s == "kline") return TokenScheme::kline;
  if (s == "image_patch") return TokenScheme::image_patch;
  throw ConfigError("model: unknown token_scheme '" + s + "'");
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["input_domain"] = domain_name(input_domain);
  j["embed_dim"] = embed_dim;
  j["encoder_layers"] = encoder_layers;
  j["heads"] = heads;
  j["decoder_layers"] = decoder_layers;
  j["decoder_dim"] = decoder_dim;
  j["token_scheme"] = scheme_name(token_scheme);
  j["image_patch_size"] = image_patch_size;
  j["mask_ratio"] = mask_ratio;
  j["grid"] = {{"height", grid.height},
               {"width", grid.width},
               {"frames", grid.frames},
               {"slices", grid.slices}};
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_domain = domain_from(j.at("input_domain").get<std::string>());
  c.embed_dim = j.at("embed_dim").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.decoder_dim = j.at("decoder_dim").get<int>();
  c.token_scheme = scheme_from(j.at("token_scheme").get<std::string>());
  c.image_patch_size = j.at("image_patch_size").get<int>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  const auto& g = j.at("grid");
  c.grid.height = g.at("height").get<int>();
  c.grid.width = g.at("width").get<int>();
  c.grid.frames = g.at("frames").get<int>();
  c.grid.slices = g.at("slices").get<int>();
  c.validate();
  return c;
}

nlohmann::json CnnConfig::to_json() const {
  nlohmann::json j;
  j["grid"] = {{"height", grid.height},
               {"width", grid.width},
               {"frames", grid.frames},
               {"slices", grid.slices}};
  j["stage_channels"] = stage_channels;
  return j;
}

CnnConfig CnnConfig::from_json(const nlohmann::json& j) {
  CnnConfig c;
  const auto& g = j.at("grid");
  c.grid.height = g.at("height").get<int>();
  c.grid.width = g.at("width").get<int>();
  c.grid.frames = g.at("frames").get<int>();
  c.grid.slices = g.at("slices").get<int>();
  c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  c.validate();
  return c;
}

double multi_slice_aggregate(const std::vector<double>& per_slice) {
  if (per_slice.empty())
    throw DataError("multi_slice_aggregate: empty slice list");
  double acc = 0;
  for (double v : per_slice) acc += v;
  return acc / static_cast<double>(per_slice.size());
}

std::vector<double> multi_slice_aggregate_probs(
    const std::vector<std::vector<double>>& per_slice) {
  if (per_slice.empty())
    throw DataError("multi_slice_aggregate: empty slice list");
  std::vector<double> acc(per_slice[0].size(), 0.0);
  for (const auto& p : per_slice) {
    if (p.size() != acc.size())
      throw DimensionError("multi_slice_aggregate: ragged probability lists");
    for (size_t i = 0; i < p.size(); ++i) acc[i] += p[i];
  }
  double sum = 0;
  for (double& v : acc) {
    v /= static_cast<double>(per_slice.size());
    sum += v;
  }
  if (sum > 0)
    for (double& v : acc) v /= sum;
  return acc;
}

CheckpointData load_checkpoint(const std::string& path) {
  Container c = read_container(path);
  CheckpointData d;
  d.meta = c.meta;
  for (const auto& a : c.arrays()) {
    if (a.dtype != "f32")
      throw DataError("checkpoint: array '" + a.name + "' is not f32");
    d.arrays.emplace_back(a.name, c.f32(a.name));
  }
  return d;
}

}  // namespace kmae
