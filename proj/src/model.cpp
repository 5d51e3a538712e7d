#include "planeformer/model.hpp"

#include <cmath>
#include <stdexcept>

namespace pf {

namespace {

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                  : std::exp(z) / (1.0 + std::exp(z));
}

// Numerically stable binary cross-entropy straight from the logit.
double bce_logit(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig cfg;
  cfg.d_app = 16;
  cfg.grid_rows = 8;
  cfg.grid_cols = 8;
  cfg.n_layers = 2;
  cfg.d_ffn = 256;
  return cfg;
}

ModelConfig ModelConfig::smoke() {
  ModelConfig cfg;
  cfg.d_app = 13;
  cfg.grid_rows = 4;
  cfg.grid_cols = 4;
  cfg.n_layers = 2;
  cfg.d_ffn = 64;
  return cfg;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"d_app", cfg.d_app},
          {"grid_rows", cfg.grid_rows},
          {"grid_cols", cfg.grid_cols},
          {"n_layers", cfg.n_layers},
          {"d_ffn", cfg.d_ffn},
          {"dropout_p", cfg.dropout_p},
          {"no_appearance", cfg.no_appearance},
          {"no_plane", cfg.no_plane},
          {"no_mask", cfg.no_mask},
          {"no_transformer", cfg.no_transformer},
          {"no_residual", cfg.no_residual}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d_app = j.at("d_app").get<int>();
  cfg.grid_rows = j.at("grid_rows").get<int>();
  cfg.grid_cols = j.at("grid_cols").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_ffn = j.at("d_ffn").get<int>();
  cfg.dropout_p = j.at("dropout_p").get<double>();
  cfg.no_appearance = j.at("no_appearance").get<bool>();
  cfg.no_plane = j.at("no_plane").get<bool>();
  cfg.no_mask = j.at("no_mask").get<bool>();
  cfg.no_transformer = j.at("no_transformer").get<bool>();
  cfg.no_residual = j.at("no_residual").get<bool>();
  return cfg;
}

// ---------------------------------------------------------------------------

PairwiseExpansion pairwise_expand(const Mat& tokens, int m1, int m2) {
  const int m = m1 + m2;
  if (m1 < 1 || m2 < 1 || tokens.rows() != m)
    throw std::invalid_argument("pairwise_expand: need m1, m2 >= 1 matching the token count");
  const Eigen::Index d = tokens.cols();
  const Eigen::RowVectorXd mu1 = tokens.topRows(m1).colwise().mean();
  const Eigen::RowVectorXd mu2 = tokens.bottomRows(m2).colwise().mean();

  PairwiseExpansion pairs;
  pairs.m = m;
  pairs.m1 = m1;
  pairs.m2 = m2;
  pairs.features.resize(static_cast<Eigen::Index>(m) * m, 4 * d);
  for (int a = 0; a < m; ++a) {
    const Eigen::RowVectorXd& mu_a = a < m1 ? mu1 : mu2;
    for (int b = 0; b < m; ++b) {
      const Eigen::Index p = pairs.index(a, b);
      pairs.features.row(p).segment(0, d) = tokens.row(a);
      pairs.features.row(p).segment(d, d) = tokens.row(b);
      pairs.features.row(p).segment(2 * d, d) = mu_a;
      pairs.features.row(p).segment(3 * d, d) = b < m1 ? mu1 : mu2;
    }
  }
  return pairs;
}

Mat pairwise_expand_backward(const PairwiseExpansion& pairs, const Mat& dfeatures) {
  const int m = pairs.m, m1 = pairs.m1, m2 = pairs.m2;
  const Eigen::Index d = dfeatures.cols() / 4;
  Mat dtokens = Mat::Zero(m, d);
  Eigen::RowVectorXd dmu1 = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd dmu2 = Eigen::RowVectorXd::Zero(d);
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) {
      const Eigen::Index p = pairs.index(a, b);
      dtokens.row(a) += dfeatures.row(p).segment(0, d);
      dtokens.row(b) += dfeatures.row(p).segment(d, d);
      (a < m1 ? dmu1 : dmu2) += dfeatures.row(p).segment(2 * d, d);
      (b < m1 ? dmu1 : dmu2) += dfeatures.row(p).segment(3 * d, d);
    }
  dtokens.topRows(m1).rowwise() += dmu1 / m1;
  dtokens.bottomRows(m2).rowwise() += dmu2 / m2;
  return dtokens;
}

// ---------------------------------------------------------------------------

PlaneFormer::PlaneFormer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.d_input() <= 0)
    throw std::invalid_argument("model config ablates every feature segment");
  Rng rng(seed);
  if (cfg_.has_projection())
    proj_ = Linear::create(ps_, "proj", cfg_.d_input(), cfg_.d_model(), rng);
  if (!cfg_.no_transformer) {
    EncoderConfig ec;
    ec.d_model = cfg_.d_model();
    ec.n_layers = cfg_.n_layers;
    ec.d_ffn = cfg_.d_ffn;
    ec.dropout_p = cfg_.dropout_p;
    encoder_ = Encoder::create(ps_, ec, rng);
  }
  const int d_pair = 4 * cfg_.d_model();
  head_pi_ = MlpHead::create(ps_, "head_pi", {d_pair, 1}, rng);
  head_c_ = MlpHead::create(ps_, "head_c", {d_pair, 1}, rng);
  if (!cfg_.no_residual) {
    head_rot_ = MlpHead::create(ps_, "head_rot", {d_pair, 4}, rng);
    head_trans_ = MlpHead::create(ps_, "head_trans", {d_pair, 3}, rng);
  }
}

Mat PlaneFormer::select_features(const Mat& features) const {
  if (!cfg_.has_projection() && !cfg_.no_appearance && !cfg_.no_plane &&
      !cfg_.no_mask)
    return features;
  Mat out(features.rows(), cfg_.d_input());
  Eigen::Index col = 0;
  if (!cfg_.no_appearance) {
    out.middleCols(col, cfg_.d_app) = features.middleCols(0, cfg_.d_app);
    col += cfg_.d_app;
  }
  if (!cfg_.no_plane) {
    out.middleCols(col, 3) = features.middleCols(cfg_.d_app, 3);
    col += 3;
  }
  if (!cfg_.no_mask) {
    const int grid = cfg_.grid_rows * cfg_.grid_cols;
    out.middleCols(col, grid) = features.middleCols(cfg_.d_app + 3, grid);
  }
  return out;
}

PlaneFormerOutputs PlaneFormer::forward(const TokenBatch& batch, bool train,
                                        Rng* rng, Trace* trace,
                                        bool with_aux_heads) const {
  if (batch.m1 < 1 || batch.m2 < 1)
    throw std::invalid_argument("forward: both views need at least one token");
  if (batch.d_app != cfg_.d_app || batch.grid_rows != cfg_.grid_rows ||
      batch.grid_cols != cfg_.grid_cols)
    throw std::invalid_argument("forward: token layout does not match the model config");

  Trace local;
  Trace& tr = trace ? *trace : local;
  tr.m1 = batch.m1;
  tr.m2 = batch.m2;

  tr.input = select_features(batch.features);
  tr.projected = cfg_.has_projection() ? proj_.forward(ps_, tr.input) : tr.input;
  tr.encoded = cfg_.no_transformer
                   ? tr.projected
                   : encoder_.forward(ps_, tr.projected, train, rng, tr.enc);
  tr.pairs = pairwise_expand(tr.encoded, batch.m1, batch.m2);

  const int p = batch.m1 * batch.m2;
  tr.cross.resize(p, tr.pairs.features.cols());
  for (int a = 0; a < batch.m1; ++a)
    for (int b = 0; b < batch.m2; ++b)
      tr.cross.row(a * batch.m2 + b) =
          tr.pairs.features.row(tr.pairs.index(a, batch.m1 + b));

  PlaneFormerOutputs out;
  const Mat c_out = head_c_.forward(ps_, tr.cross, tr.c_cache);
  out.c_logit = c_out.col(0).mean();
  out.c = sigmoid(out.c_logit);

  tr.aux_heads_ran = with_aux_heads;
  if (with_aux_heads) {
    const Mat pi_out = head_pi_.forward(ps_, tr.cross, tr.pi_cache);
    out.pi_logits.resize(batch.m1, batch.m2);
    out.pi.resize(batch.m1, batch.m2);
    for (int a = 0; a < batch.m1; ++a)
      for (int b = 0; b < batch.m2; ++b) {
        out.pi_logits(a, b) = pi_out(a * batch.m2 + b, 0);
        out.pi(a, b) = sigmoid(out.pi_logits(a, b));
      }
    if (!cfg_.no_residual) {
      const Mat rot_out = head_rot_.forward(ps_, tr.cross, tr.rot_cache);
      const Mat trans_out = head_trans_.forward(ps_, tr.cross, tr.trans_cache);
      out.delta_q = rot_out.colwise().mean().transpose();
      out.delta_t = trans_out.colwise().mean().transpose();
      out.has_residual = true;
    }
  }
  return out;
}

void PlaneFormer::backward(const Trace& trace, const Mat& dpi_logits,
                           double dc_logit, const Eigen::Vector4d& ddelta_q,
                           const Vec3& ddelta_t) {
  const int p = trace.m1 * trace.m2;
  Mat dcross = Mat::Zero(p, trace.cross.cols());

  Mat dc = Mat::Constant(p, 1, dc_logit / p);
  dcross += head_c_.backward(ps_, trace.c_cache, dc);

  if (trace.aux_heads_ran) {
    if (dpi_logits.size() > 0 && !dpi_logits.isZero(0.0)) {
      Mat dpi(p, 1);
      for (int a = 0; a < trace.m1; ++a)
        for (int b = 0; b < trace.m2; ++b)
          dpi(a * trace.m2 + b, 0) = dpi_logits(a, b);
      dcross += head_pi_.backward(ps_, trace.pi_cache, dpi);
    }
    if (!cfg_.no_residual) {
      if (!ddelta_q.isZero(0.0)) {
        const Mat drot = Mat::Ones(p, 1) * (ddelta_q.transpose() / p);
        dcross += head_rot_.backward(ps_, trace.rot_cache, drot);
      }
      if (!ddelta_t.isZero(0.0)) {
        const Mat dtrans = Mat::Ones(p, 1) * (ddelta_t.transpose() / p);
        dcross += head_trans_.backward(ps_, trace.trans_cache, dtrans);
      }
    }
  }

  Mat dpairs = Mat::Zero(trace.pairs.features.rows(), trace.pairs.features.cols());
  for (int a = 0; a < trace.m1; ++a)
    for (int b = 0; b < trace.m2; ++b)
      dpairs.row(trace.pairs.index(a, trace.m1 + b)) = dcross.row(a * trace.m2 + b);

  Mat dtokens = pairwise_expand_backward(trace.pairs, dpairs);
  if (!cfg_.no_transformer) dtokens = encoder_.backward(ps_, trace.enc, dtokens);
  if (cfg_.has_projection()) proj_.backward(ps_, trace.input, dtokens);
}

// ---------------------------------------------------------------------------

LossComponents compute_loss(const PlaneFormerOutputs& out,
                            const GroundTruthPair& gt, const LossWeights& w) {
  LossComponents c;
  if (gt.hyp_correct) {
    const Eigen::Index entries = out.pi_logits.size();
    if (out.pi_logits.rows() != gt.match.rows() ||
        out.pi_logits.cols() != gt.match.cols() || entries == 0)
      throw std::invalid_argument("compute_loss: match matrix shape mismatch");
    double pi_sum = 0.0;
    for (Eigen::Index i = 0; i < out.pi_logits.rows(); ++i)
      for (Eigen::Index j = 0; j < out.pi_logits.cols(); ++j)
        pi_sum += bce_logit(out.pi_logits(i, j), gt.match(i, j));
    c.pi = w.w_pi * pi_sum / entries;
    c.c = w.w_c * bce_logit(out.c_logit, 1.0);
    if (out.has_residual) {
      c.rot = w.w_rot * (out.delta_q - gt.residual_q).cwiseAbs().sum();
      c.trans = w.lambda_t * (out.delta_t - gt.residual_t).cwiseAbs().sum();
    }
  } else {
    c.c = w.w_c * bce_logit(out.c_logit, 0.0);
  }
  c.total = c.pi + c.c + c.rot + c.trans;
  return c;
}

LossComponents loss_and_backward(PlaneFormer& model,
                                 const PlaneFormer::Trace& trace,
                                 const PlaneFormerOutputs& out,
                                 const GroundTruthPair& gt,
                                 const LossWeights& w) {
  const LossComponents c = compute_loss(out, gt, w);
  Mat dpi;
  Eigen::Vector4d ddq = Eigen::Vector4d::Zero();
  Vec3 ddt = Vec3::Zero();
  double dc = 0.0;
  if (gt.hyp_correct) {
    const double scale = w.w_pi / gt.match.size();
    dpi.resize(out.pi_logits.rows(), out.pi_logits.cols());
    for (Eigen::Index i = 0; i < dpi.rows(); ++i)
      for (Eigen::Index j = 0; j < dpi.cols(); ++j)
        dpi(i, j) = scale * (sigmoid(out.pi_logits(i, j)) - gt.match(i, j));
    dc = w.w_c * (sigmoid(out.c_logit) - 1.0);
    if (out.has_residual) {
      for (int i = 0; i < 4; ++i)
        ddq(i) = w.w_rot * sign(out.delta_q(i) - gt.residual_q(i));
      for (int i = 0; i < 3; ++i)
        ddt(i) = w.lambda_t * sign(out.delta_t(i) - gt.residual_t(i));
    }
  } else {
    dc = w.w_c * sigmoid(out.c_logit);
  }
  model.backward(trace, dpi, dc, ddq, ddt);
  return c;
}

// ---------------------------------------------------------------------------

TrainingPair make_training_pair(const Episode& episode,
                                const CameraCodebook& codebook,
                                const TokenConfig& grid, Rng& rng) {
  if (episode.pairs.empty())
    throw std::invalid_argument("make_training_pair: episode has no view pairs");
  const int k = static_cast<int>(codebook.entries.size());
  if (k < 2)
    throw std::invalid_argument("make_training_pair: codebook needs at least two entries");

  TrainingPair tp;
  const PairData& pd =
      episode.pairs[rng.uniform_index(episode.pairs.size())];
  tp.pair = &pd;

  const int nearest = nearest_codebook_entry(pd.gt_rel, codebook);
  const bool correct = rng.bernoulli(0.5);
  int hyp_index;
  if (correct) {
    hyp_index = nearest;
  } else {
    const int r = static_cast<int>(rng.uniform_index(k - 1));
    hyp_index = r >= nearest ? r + 1 : r;
  }
  const Pose& hyp = codebook.entries[hyp_index];

  tp.batch = assemble_tokens(episode.views[pd.view_a].detections,
                             episode.views[pd.view_b].detections, hyp,
                             episode.intrinsics, episode.intrinsics, grid);

  tp.gt.hyp_index = hyp_index;
  tp.gt.hyp_correct = correct;
  tp.gt.match = Mat::Zero(tp.batch.m1, tp.batch.m2);
  for (const auto& [i, j] : pd.gt_matches) tp.gt.match(i, j) = 1.0;
  if (correct) {
    const Quat rq =
        canonicalized(quat_multiply(pd.gt_rel.q, quat_conjugate(hyp.q)));
    tp.gt.residual_q = Eigen::Vector4d(rq.w, rq.x, rq.y, rq.z);
    tp.gt.residual_t = pd.gt_rel.t - hyp.t;
  }
  return tp;
}

}  // namespace pf
