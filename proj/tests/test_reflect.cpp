#include <doctest.h>

#include <calm/reflect.hpp>

using namespace calm;
using ad::Mat;
using ad::Value;

namespace {

struct Rig {
  nn::ParamRegistry reg;
  encoder::EncoderConfig ecfg;
  alignment::AlignmentConfig acfg;
  reflect::ReflectConfig rcfg;
  encoder::Encoder enc;
  alignment::AlignmentPool pool;
  reflect::ReflectiveLoop loop;
  int d = 10;

  explicit Rig(std::uint64_t seed) {
    Rng rng(seed);
    ecfg.vocab_size = 64;
    ecfg.d_model = 16;
    ecfg.n_layers = 1;
    ecfg.n_heads = 2;
    ecfg.ffn_hidden = 32;
    ecfg.max_len = 24;
    ecfg.head_hidden = 8;
    acfg.clusters = 3;
    acfg.cluster_hidden = 8;
    acfg.attn_heads = 2;
    acfg.d_align = 8;
    acfg.experts_per_dim = 2;
    acfg.expert_hidden = 8;
    acfg.expert_ffn = 16;
    acfg.fusion_hidden = 8;
    acfg.d_calib = 6;
    d = ecfg.d_model;
    enc = encoder::Encoder(reg, ecfg, 4, rng);
    pool = alignment::AlignmentPool(reg, acfg, d, rng);
    loop = reflect::ReflectiveLoop(reg, rcfg, ecfg.d_model, d, acfg.d_calib, 4, 4, rng);
  }

  alignment::IdentityState identity_from(const Mat& pooled, const Mat& calib) const {
    return {ad::constant(pooled), ad::constant(pooled), ad::constant(calib)};
  }
};

Mat random_mat(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("zero task and zero identity produce an exactly zero prompt") {
  // Every bias starts at zero, so the all-zero input stays zero through the
  // prompt MLP and the pre-LN decoder stack.
  Rig rig(1);
  auto id = rig.identity_from(Mat::Zero(1, 2 * rig.d), Mat::Zero(1, rig.acfg.d_calib));
  auto prompt =
      rig.loop.generate_prompt(ad::constant(Mat::Zero(3, rig.ecfg.d_model)), id);
  CHECK(prompt.vectors->val.rows() == rig.rcfg.prompt_len);
  CHECK(prompt.vectors->val.cols() == rig.ecfg.d_model);
  CHECK(prompt.vectors->val.isZero(0.0));
}

TEST_CASE("distinct identities lead to distinct prompts") {
  Rig rig(2);
  Value h_task = ad::constant(random_mat(3, rig.ecfg.d_model, 11));
  auto a = rig.loop.generate_prompt(
      h_task, rig.identity_from(random_mat(1, 2 * rig.d, 13),
                                Mat::Zero(1, rig.acfg.d_calib)));
  auto b = rig.loop.generate_prompt(
      h_task, rig.identity_from(random_mat(1, 2 * rig.d, 17),
                                Mat::Zero(1, rig.acfg.d_calib)));
  CHECK((a.vectors->val - b.vectors->val).cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("prompt shape is fixed by the config") {
  Rig rig(3);
  for (int n : {1, 4, 9}) {
    auto p = rig.loop.generate_prompt(
        ad::constant(random_mat(n, rig.ecfg.d_model, 19 + n)),
        rig.identity_from(random_mat(1, 2 * rig.d, 23 + n),
                          random_mat(1, rig.acfg.d_calib, 29 + n)));
    CHECK(p.vectors->val.rows() == rig.rcfg.prompt_len);
    CHECK(p.vectors->val.cols() == rig.ecfg.d_model);
  }
}

TEST_CASE("a zero prompt is equivalent to an absent prompt") {
  Rig rig(4);
  std::vector<int> tokens{5, 9, 12, 3};
  reflect::PromptEmbedding zero{
      ad::constant(Mat::Zero(rig.rcfg.prompt_len, rig.ecfg.d_model))};
  auto rec = rig.loop.reason(zero, tokens, rig.enc);
  // Absent prompt: pooled encoder states (at the same position offset)
  // through the task head alone. The prompt-context projection has a zero
  // bias at initialization, so the zero prompt adds exactly nothing.
  auto h = rig.enc.encode(tokens, rig.rcfg.prompt_len);
  Value pooled = ad::mean_rows(h.values);
  // Reconstruct logits via the same head by reasoning on the zero prompt
  // and comparing penult to the bare pooled representation.
  CHECK((rec.penult->val - pooled->val).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("reason returns task-sized deterministic logits") {
  Rig rig(5);
  std::vector<int> tokens{1, 2, 3};
  reflect::PromptEmbedding prompt{
      ad::constant(random_mat(rig.rcfg.prompt_len, rig.ecfg.d_model, 31))};
  auto a = rig.loop.reason(prompt, tokens, rig.enc);
  auto b = rig.loop.reason(prompt, tokens, rig.enc);
  CHECK(a.logits->val.cols() == 4);
  CHECK(a.logits->val == b.logits->val);
  CHECK(a.label == b.label);
  Eigen::Index best;
  a.logits->val.row(0).maxCoeff(&best);
  CHECK(a.label == static_cast<int>(best));
}

TEST_CASE("inferred culture distribution is a proper softmax") {
  Rig rig(6);
  reflect::PromptEmbedding prompt{
      ad::constant(random_mat(rig.rcfg.prompt_len, rig.ecfg.d_model, 37))};
  auto raw = rig.loop.reason(prompt, {4, 8, 15}, rig.enc);
  auto est = rig.loop.infer_identity(raw);
  CHECK(est.culture_dist->val.cols() == 4);
  CHECK(est.culture_dist->val.row(0).sum() == doctest::Approx(1.0).epsilon(1e-6));
  for (int j = 0; j < 4; ++j) CHECK(est.culture_dist->val(0, j) >= 0.0);
  CHECK(est.h_reverse->val.cols() == rig.acfg.d_calib);
  auto est2 = rig.loop.infer_identity(raw);
  CHECK(est.culture_dist->val == est2.culture_dist->val);
  CHECK(est.h_reverse->val == est2.h_reverse->val);
}

TEST_CASE("identity loss gradient matches finite differences") {
  Rig rig(7);
  Mat penult = random_mat(1, rig.ecfg.d_model, 41);
  auto eval = [&](const Mat& pv) {
    reflect::PredictionRecord rec;
    rec.penult = ad::constant(pv);
    auto est = rig.loop.infer_identity(rec);
    return rig.loop.identity_loss(est, 2);
  };
  reflect::PredictionRecord rec;
  rec.penult = ad::param(penult);
  auto est = rig.loop.infer_identity(rec);
  auto loss = rig.loop.identity_loss(est, 2);
  ad::backward(loss);
  double eps = 1e-7;
  for (int j = 0; j < rig.ecfg.d_model; ++j) {
    Mat up = penult, dn = penult;
    up(0, j) += eps;
    dn(0, j) -= eps;
    double fd = (eval(up)->val(0, 0) - eval(dn)->val(0, 0)) / (2 * eps);
    double an = rec.penult->grad(0, j);
    double scale = std::max({std::abs(fd), std::abs(an), 1e-4});
    CHECK(std::abs(an - fd) / scale < 1e-4);
  }
}

TEST_CASE("calibration loss is one minus cosine and detaches its inputs") {
  Rig rig(12);
  reflect::PredictionRecord rec;
  rec.penult = ad::param(random_mat(1, rig.ecfg.d_model, 43));
  Value calib = ad::param(random_mat(1, rig.acfg.d_calib, 47));

  // Oracle: cosine between the inverse projection of penult (as surfaced by
  // infer_identity) and the calibration target.
  auto est = rig.loop.infer_identity(rec);
  double cos = ad::cosine(ad::constant(calib->val), est.h_reverse)->val(0, 0);

  auto loss = rig.loop.calibration_loss(rec, calib);
  CHECK(loss->val.rows() == 1);
  CHECK(loss->val.cols() == 1);
  CHECK(loss->val(0, 0) == doctest::Approx(1.0 - cos).epsilon(1e-12));

  // Both penult and calib are held fixed: the readout trains alone, so no
  // gradient reaches either input.
  ad::backward(loss);
  CHECK(rec.penult->grad.isZero(0.0));
  CHECK(calib->grad.isZero(0.0));
}

TEST_CASE("matching calibration vectors accept without correction") {
  Rig rig(8);
  std::vector<int> tokens{5, 6, 7};
  Mat pooled = random_mat(1, 2 * rig.d, 43);
  Value h_task = ad::constant(random_mat(3, rig.ecfg.d_model, 47));
  // First pass to discover the reverse embedding this identity induces.
  auto probe_id = rig.identity_from(pooled, Mat::Zero(1, rig.acfg.d_calib));
  auto raw = rig.loop.reason(rig.loop.generate_prompt(h_task, probe_id), tokens, rig.enc);
  Eigen::RowVectorXd r = rig.loop.infer_identity(raw).h_reverse->val.row(0);

  reflect::CalibrationConfig cfg;
  auto id = rig.identity_from(pooled, Mat(r));
  auto re = ad::constant(random_mat(3, rig.d, 53));
  auto rl = ad::constant(random_mat(3, rig.d, 59));
  auto trace = rig.loop.calibrate_and_correct(id, h_task, tokens, re, rl, cfg, rig.pool,
                                              rig.enc, 99);
  CHECK(trace.delta == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_FALSE(trace.corrected);
  // Accept path: the final output is bit-identical to the raw output.
  CHECK(trace.final_output.logits->val == trace.raw_output.logits->val);
  CHECK(trace.final_output.label == trace.raw_output.label);
  CHECK(trace.delta_after == trace.delta);
}

TEST_CASE("orthogonal calibration vectors trigger exactly one correction") {
  Rig rig(9);
  std::vector<int> tokens{2, 9, 4};
  Mat pooled = random_mat(1, 2 * rig.d, 61);
  Value h_task = ad::constant(random_mat(3, rig.ecfg.d_model, 67));
  auto probe_id = rig.identity_from(pooled, Mat::Zero(1, rig.acfg.d_calib));
  auto raw = rig.loop.reason(rig.loop.generate_prompt(h_task, probe_id), tokens, rig.enc);
  Eigen::RowVectorXd r = rig.loop.infer_identity(raw).h_reverse->val.row(0);
  // Build a vector orthogonal to r via Gram-Schmidt on a random direction.
  Rng rng(71);
  Eigen::RowVectorXd v(rig.acfg.d_calib);
  for (int j = 0; j < v.size(); ++j) v(j) = rng.normal();
  v -= (v.dot(r) / r.squaredNorm()) * r;

  reflect::CalibrationConfig cfg;
  auto id = rig.identity_from(pooled, Mat(v));
  auto re = ad::constant(random_mat(3, rig.d, 73));
  auto rl = ad::constant(random_mat(3, rig.d, 79));
  auto trace = rig.loop.calibrate_and_correct(id, h_task, tokens, re, rl, cfg, rig.pool,
                                              rig.enc, 101);
  CHECK(trace.delta == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(trace.corrected);
  CHECK(trace.delta < cfg.threshold);
  // At most one cycle: the corrected flag is terminal and delta_after is
  // recorded without driving another pass.
  auto again = rig.loop.calibrate_and_correct(id, h_task, tokens, re, rl, cfg, rig.pool,
                                              rig.enc, 101);
  CHECK(again.corrected == trace.corrected);
  CHECK(again.final_output.logits->val == trace.final_output.logits->val);
  CHECK(again.delta_after == trace.delta_after);
}

TEST_CASE("correction is deterministic in the correction seed") {
  Rig rig(10);
  std::vector<int> tokens{3, 3, 8, 1};
  Mat pooled = random_mat(1, 2 * rig.d, 83);
  Value h_task = ad::constant(random_mat(4, rig.ecfg.d_model, 89));
  Mat ortho = Mat::Zero(1, rig.acfg.d_calib);
  ortho(0, 0) = 1.0;
  // Force a mismatch by using a calibration vector unrelated to the head.
  reflect::CalibrationConfig cfg;
  cfg.threshold = 0.99;
  auto id = rig.identity_from(pooled, ortho);
  auto re = ad::constant(random_mat(4, rig.d, 97));
  auto rl = ad::constant(random_mat(4, rig.d, 101));
  auto a = rig.loop.calibrate_and_correct(id, h_task, tokens, re, rl, cfg, rig.pool,
                                          rig.enc, 7);
  auto b = rig.loop.calibrate_and_correct(id, h_task, tokens, re, rl, cfg, rig.pool,
                                          rig.enc, 7);
  auto c = rig.loop.calibrate_and_correct(id, h_task, tokens, re, rl, cfg, rig.pool,
                                          rig.enc, 8);
  REQUIRE(a.corrected);
  CHECK(a.final_output.logits->val == b.final_output.logits->val);
  CHECK(a.delta_after == b.delta_after);
  // A different noise seed revises the identity differently.
  CHECK(a.delta_after != c.delta_after);
}

TEST_CASE("calibration config is validated") {
  reflect::CalibrationConfig cfg;
  cfg.threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.threshold = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.threshold = 0.5;
  cfg.max_cycles = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.max_cycles = 1;
  CHECK_NOTHROW(cfg.validate());
}
