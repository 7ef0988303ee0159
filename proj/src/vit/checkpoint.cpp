// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <nlohmann/json.hpp>

#include "shortlens/error.hpp"
#include "shortlens/store/tensor_file.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::vit {

namespace fs = std::filesystem;
using nlohmann::json;

json config_to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"channels", c.channels},     {"embed_dim", c.embed_dim},
          {"heads", c.heads},           {"blocks", c.blocks},
          {"mlp_ratio", c.mlp_ratio},   {"classes", c.classes},
          {"input_mean", c.input_mean}, {"input_std", c.input_std},
          {"seed", c.seed}};
}

ViTConfig config_from_json(const json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.channels = j.at("channels");
  c.embed_dim = j.at("embed_dim");
  c.heads = j.at("heads");
  c.blocks = j.at("blocks");
  c.mlp_ratio = j.at("mlp_ratio");
  c.classes = j.at("classes");
  c.input_mean = j.value("input_mean", c.input_mean);
  c.input_std = j.value("input_std", c.input_std);
  c.seed = j.at("seed");
  return c;
}

void save_checkpoint(const ViTModel& model, const fs::path& dir) {
  json params = json::array();
  for (const auto& t : model.layout()) {
    params.push_back({{"name", t.name},
                      {"shape", {t.rows, t.cols}},
                      {"offset", t.offset}});
  }
  const json manifest = {{"format", "shortlens-vit"},
                         {"version", 1},
                         {"config", config_to_json(model.config())},
                         {"seed", model.config().seed},
                         {"dtype", "f64le"},
                         {"weights_file", "weights.bin"},
                         {"parameter_count", model.params().size()},
                         {"parameters", params}};
  fs::create_directories(dir);
  store::atomic_write(dir / "weights.bin", std::as_bytes(model.params()));
  store::atomic_write(dir / "manifest.json", manifest.dump(2));
}

ViTModel load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw NotFound("no checkpoint manifest in " + dir.string());
  const json manifest = json::parse(store::read_text(mpath));
  if (manifest.value("format", "") != "shortlens-vit") {
    throw IntegrityError("not a shortlens-vit checkpoint", 0);
  }
  ViTModel model(config_from_json(manifest.at("config")));
  const auto& params = manifest.at("parameters");
  if (params.size() != model.layout().size()) {
    throw IntegrityError("checkpoint tensor list disagrees with config", 0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = model.layout()[i];
    const auto shape = params[i].at("shape").get<std::vector<std::size_t>>();
    if (params[i].at("name") != t.name || shape.size() != 2 ||
        shape[0] != t.rows || shape[1] != t.cols) {
      throw IntegrityError("checkpoint tensor '" + t.name +
                               "' disagrees with config",
                           0);
    }
  }
  const auto bytes = store::read_bytes(dir / manifest.value("weights_file", "weights.bin"));
  const std::size_t expected = model.params().size() * sizeof(double);
  if (bytes.size() != expected) {
    throw IntegrityError("weights file holds " + std::to_string(bytes.size()) +
                             " bytes, manifest declares " +
                             std::to_string(expected),
                         std::min(bytes.size(), expected));
  }
  std::memcpy(model.params().data(), bytes.data(), expected);
  return model;
}

}  // namespace shortlens::vit
