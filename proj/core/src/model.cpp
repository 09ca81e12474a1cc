#include "calm/model.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace calm::model {

using json = nlohmann::ordered_json;

CalmModel::CalmModel(const ModelConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.init_seed ^ 0x1117ULL);
  encoder_ = encoder::Encoder(reg_, cfg.encoder, cfg.num_cultures, rng);
  heads_ = contrastive::ProjectionHeads(reg_, cfg.encoder.d_model, cfg.proj_hidden, rng);
  pool_ = alignment::AlignmentPool(reg_, cfg.alignment, cfg.encoder.d_model, rng);
  loop_ = reflect::ReflectiveLoop(reg_, cfg.reflect, cfg.encoder.d_model,
                                  cfg.encoder.d_model, cfg.alignment.d_calib,
                                  cfg.task_label_count, cfg.num_cultures, rng);
}

CalmModel::Refined CalmModel::refine(const std::vector<int>& tokens) const {
  auto h = encoder_.encode(tokens);
  auto acs = encoder_.disentangle(h);
  return {acs.h_task,
          heads_.refine(acs.h_explicit, contrastive::Channel::Explicit),
          heads_.refine(acs.h_latent, contrastive::Channel::Latent), acs};
}

Eigen::RowVectorXd CalmModel::refined_embedding(const std::vector<int>& tokens) const {
  auto r = refine(tokens);
  auto pe = ad::l2_normalize_rows(ad::mean_rows(r.refined_explicit));
  auto pl = ad::l2_normalize_rows(ad::mean_rows(r.refined_latent));
  Eigen::RowVectorXd out(pe->val.cols() + pl->val.cols());
  out << pe->val.row(0), pl->val.row(0);
  return out;
}

void CalmModel::save_checkpoint(const std::string& dir, const std::string& config_hash,
                                std::uint64_t seed) const {
  std::filesystem::create_directories(dir);
  std::ofstream blob(dir + "/params.bin", std::ios::binary);
  if (!blob) throw InputError("checkpoint: cannot write " + dir + "/params.bin");
  json manifest;
  manifest["format"] = "calm-checkpoint-v1";
  manifest["config_hash"] = config_hash;
  manifest["seed"] = seed;
  json shapes = json::array();
  for (std::size_t i = 0; i < reg_.size(); ++i) {
    const auto& p = reg_.params()[i];
    shapes.push_back({{"name", reg_.names()[i]},
                      {"rows", p->val.rows()},
                      {"cols", p->val.cols()}});
    // Eigen default storage is column-major; write in that order.
    blob.write(reinterpret_cast<const char*>(p->val.data()),
               static_cast<std::streamsize>(p->val.size() * sizeof(double)));
  }
  manifest["params"] = shapes;
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

void CalmModel::load_checkpoint(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw InputError("checkpoint: cannot read " + dir + "/manifest.json");
  json manifest = json::parse(mf);
  const auto& shapes = manifest.at("params");
  if (shapes.size() != reg_.size())
    throw InputError("checkpoint: parameter count mismatch");
  std::ifstream blob(dir + "/params.bin", std::ios::binary);
  if (!blob) throw InputError("checkpoint: cannot read " + dir + "/params.bin");
  for (std::size_t i = 0; i < reg_.size(); ++i) {
    const auto& s = shapes[i];
    auto& p = reg_.params()[i];
    if (s.at("name") != reg_.names()[i] || s.at("rows") != p->val.rows() ||
        s.at("cols") != p->val.cols())
      throw InputError("checkpoint: shape mismatch at " + reg_.names()[i]);
    blob.read(reinterpret_cast<char*>(p->val.data()),
              static_cast<std::streamsize>(p->val.size() * sizeof(double)));
    if (!blob) throw InputError("checkpoint: truncated blob");
  }
}

}  // namespace calm::model
