#pragma once

// Flat dotted-key configuration ("model.d", "train.lr", ...). The same object
// is read from --config files, written into run manifests, and overridden by
// command-line flags.

#include <string>

#include <nlohmann/json.hpp>

#include "cohesion/error.hpp"
#include "cohesion/model.hpp"
#include "cohesion/training.hpp"

namespace cohesion {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

inline nlohmann::json to_flat_json(const RunConfig& rc) {
  const auto& m = rc.model;
  const auto& t = rc.train;
  return {
      {"model.d", m.d},
      {"model.L", m.layers},
      {"model.L_u", m.user_layers},
      {"model.L_i", m.item_layers},
      {"model.k_uu", m.k_uu},
      {"model.k_ii", m.k_ii},
      {"model.eps", m.eps},
      {"model.leaky_slope", m.leaky_slope},
      {"model.refine_i", m.refine[0]},
      {"model.refine_t", m.refine[1]},
      {"model.refine_v", m.refine[2]},
      {"model.use_uu", m.use_uu},
      {"model.use_ii", m.use_ii},
      {"model.fusion_mode", std::string(to_string(m.fusion_mode))},
      {"model.knn_refresh_interval", m.knn_refresh_interval},
      {"model.knn_source", std::string(to_string(m.knn_source))},
      {"model.item_row_normalize", m.item_row_normalize},
      {"train.lr", t.lr},
      {"train.reg_lambda", t.reg_lambda},
      {"train.batch_size", t.batch_size},
      {"train.max_epochs", t.max_epochs},
      {"train.patience", t.patience},
      {"train.seed", t.seed},
      {"train.adaptive_loss", t.adaptive_loss},
      {"train.fused_loss_weight", t.fused_loss_weight},
      {"train.weights_through", t.weights_through},
  };
}

// Applies every recognised key of `j` on top of `rc`. Unknown "model." or
// "train." keys are rejected; other keys are left to the caller.
inline void apply_flat_json(RunConfig& rc, const nlohmann::json& j) {
  if (!j.is_object()) throw Error("config must be a JSON object");
  auto& m = rc.model;
  auto& t = rc.train;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "model.d") m.d = v.get<std::size_t>();
      else if (key == "model.L") m.layers = v.get<std::size_t>();
      else if (key == "model.L_u") m.user_layers = v.get<std::size_t>();
      else if (key == "model.L_i") m.item_layers = v.get<std::size_t>();
      else if (key == "model.k_uu") m.k_uu = v.get<std::size_t>();
      else if (key == "model.k_ii") m.k_ii = v.get<std::size_t>();
      else if (key == "model.eps") m.eps = v.get<double>();
      else if (key == "model.leaky_slope") m.leaky_slope = v.get<double>();
      else if (key == "model.refine_i") m.refine[0] = v.get<bool>();
      else if (key == "model.refine_t") m.refine[1] = v.get<bool>();
      else if (key == "model.refine_v") m.refine[2] = v.get<bool>();
      else if (key == "model.use_uu") m.use_uu = v.get<bool>();
      else if (key == "model.use_ii") m.use_ii = v.get<bool>();
      else if (key == "model.fusion_mode") m.fusion_mode = parse_fusion_mode(v.get<std::string>());
      else if (key == "model.knn_refresh_interval") m.knn_refresh_interval = v.get<std::size_t>();
      else if (key == "model.knn_source") m.knn_source = parse_knn_source(v.get<std::string>());
      else if (key == "model.item_row_normalize") m.item_row_normalize = v.get<bool>();
      else if (key == "train.lr") t.lr = v.get<double>();
      else if (key == "train.reg_lambda") t.reg_lambda = v.get<double>();
      else if (key == "train.batch_size") t.batch_size = v.get<std::size_t>();
      else if (key == "train.max_epochs") t.max_epochs = v.get<std::size_t>();
      else if (key == "train.patience") t.patience = v.get<std::size_t>();
      else if (key == "train.seed") t.seed = v.get<std::uint64_t>();
      else if (key == "train.adaptive_loss") t.adaptive_loss = v.get<bool>();
      else if (key == "train.fused_loss_weight") t.fused_loss_weight = v.get<double>();
      else if (key == "train.weights_through") t.weights_through = v.get<bool>();
      else if (key.rfind("model.", 0) == 0 || key.rfind("train.", 0) == 0)
        throw Error("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw Error("config key '" + key + "': " + e.what());
    }
  }
}

}  // namespace cohesion
