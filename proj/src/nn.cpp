#include "planeformer/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

namespace pf {

int ParamStore::add(const std::string& name, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("parameter shape must be positive: " + name);
  if (find(name) >= 0) throw std::invalid_argument("duplicate parameter name: " + name);
  names_.push_back(name);
  values_.push_back(Mat::Zero(rows, cols));
  grads_.push_back(Mat::Zero(rows, cols));
  momentum_.push_back(Mat::Zero(rows, cols));
  return count() - 1;
}

int ParamStore::add_xavier(const std::string& name, int rows, int cols, Rng& rng) {
  const int id = add(name, rows, cols);
  const double limit = std::sqrt(6.0 / (rows + cols));
  Mat& w = values_[id];
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w(r, c) = rng.uniform(-limit, limit);
  return id;
}

int ParamStore::find(const std::string& name) const {
  for (int i = 0; i < count(); ++i)
    if (names_[i] == name) return i;
  return -1;
}

std::size_t ParamStore::coefficient_count() const {
  std::size_t n = 0;
  for (const Mat& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

void ParamStore::zero_grad() {
  for (Mat& g : grads_) g.setZero();
}

// ---------------------------------------------------------------------------

Linear Linear::create(ParamStore& ps, const std::string& prefix, int d_in,
                      int d_out, Rng& rng) {
  Linear l;
  l.d_in = d_in;
  l.d_out = d_out;
  l.w = ps.add_xavier(prefix + ".W", d_in, d_out, rng);
  l.b = ps.add(prefix + ".b", 1, d_out);
  return l;
}

Mat Linear::forward(const ParamStore& ps, const Mat& x) const {
  return (x * ps.value(w)).rowwise() + ps.value(b).row(0);
}

Mat Linear::backward(ParamStore& ps, const Mat& x, const Mat& dy) const {
  ps.grad(w) += x.transpose() * dy;
  ps.grad(b).row(0) += dy.colwise().sum();
  return dy * ps.value(w).transpose();
}

// ---------------------------------------------------------------------------

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& prefix, int d) {
  LayerNorm ln;
  ln.d = d;
  ln.gamma = ps.add(prefix + ".W", 1, d);
  ln.beta = ps.add(prefix + ".b", 1, d);
  ps.value(ln.gamma).setOnes();
  return ln;
}

Mat LayerNorm::forward(const ParamStore& ps, const Mat& x, Cache& cache) const {
  const Eigen::Index n = x.rows();
  cache.xhat.resize(n, d);
  cache.inv_std.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kEps);
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mu) * inv;
  }
  Mat y = cache.xhat;
  y.array().rowwise() *= ps.value(gamma).row(0).array();
  y.rowwise() += ps.value(beta).row(0);
  return y;
}

Mat LayerNorm::backward(ParamStore& ps, const Cache& cache, const Mat& dy) const {
  const Eigen::Index n = dy.rows();
  ps.grad(gamma).row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  ps.grad(beta).row(0) += dy.colwise().sum();
  Mat dx(n, d);
  const auto g = ps.value(gamma).row(0).array();
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::ArrayXd dxhat = dy.row(r).array().transpose() * g.transpose();
    const Eigen::ArrayXd xh = cache.xhat.row(r).array().transpose();
    const double s1 = dxhat.sum();
    const double s2 = (dxhat * xh).sum();
    dx.row(r) = (cache.inv_std(r) / d) * (d * dxhat - s1 - xh * s2).matrix().transpose();
  }
  return dx;
}

// ---------------------------------------------------------------------------

Mat Dropout::forward(const Mat& x, bool train, Rng* rng, Cache& cache) const {
  if (!train || p <= 0.0) {
    cache.active = false;
    return x;
  }
  if (rng == nullptr) throw std::invalid_argument("dropout in train mode needs an rng");
  cache.active = true;
  cache.mask.resize(x.rows(), x.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      cache.mask(r, c) = rng->uniform() < p ? 0.0 : 1.0 / keep;
  return x.cwiseProduct(cache.mask);
}

Mat Dropout::backward(const Cache& cache, const Mat& dy) const {
  if (!cache.active) return dy;
  return dy.cwiseProduct(cache.mask);
}

// ---------------------------------------------------------------------------

Attention Attention::create(ParamStore& ps, const std::string& prefix, int d, Rng& rng) {
  Attention a;
  a.d = d;
  a.q = Linear::create(ps, prefix + ".q", d, d, rng);
  a.k = Linear::create(ps, prefix + ".k", d, d, rng);
  a.v = Linear::create(ps, prefix + ".v", d, d, rng);
  a.o = Linear::create(ps, prefix + ".o", d, d, rng);
  return a;
}

Mat Attention::forward(const ParamStore& ps, const Mat& x, Cache& cache) const {
  cache.x = x;
  cache.qm = q.forward(ps, x);
  cache.km = k.forward(ps, x);
  cache.vm = v.forward(ps, x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat scores = cache.qm * cache.km.transpose() * scale;
  cache.attn.resize(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double m = scores.row(r).maxCoeff();
    Eigen::ArrayXd e = (scores.row(r).array() - m).exp();
    cache.attn.row(r) = (e / e.sum()).matrix().transpose();
  }
  cache.ctx = cache.attn * cache.vm;
  return o.forward(ps, cache.ctx);
}

Mat Attention::backward(ParamStore& ps, const Cache& cache, const Mat& dy) const {
  const Mat dctx = o.backward(ps, cache.ctx, dy);
  Mat dattn = dctx * cache.vm.transpose();
  const Mat dvm = cache.attn.transpose() * dctx;
  // Row-wise softmax Jacobian: ds = a .* (dattn - rowsum(dattn .* a)).
  Mat ds(dattn.rows(), dattn.cols());
  for (Eigen::Index r = 0; r < dattn.rows(); ++r) {
    const Eigen::ArrayXd a = cache.attn.row(r).array().transpose();
    const Eigen::ArrayXd da = dattn.row(r).array().transpose();
    const double dot = (a * da).sum();
    ds.row(r) = (a * (da - dot)).matrix().transpose();
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Mat dqm = ds * cache.km * scale;
  const Mat dkm = ds.transpose() * cache.qm * scale;
  Mat dx = q.backward(ps, cache.x, dqm);
  dx += k.backward(ps, cache.x, dkm);
  dx += v.backward(ps, cache.x, dvm);
  return dx;
}

// ---------------------------------------------------------------------------

EncoderLayer EncoderLayer::create(ParamStore& ps, const std::string& prefix,
                                  int d, int d_ffn, double dropout_p, Rng& rng) {
  EncoderLayer l;
  l.attn = Attention::create(ps, prefix + ".attn", d, rng);
  l.norm1 = LayerNorm::create(ps, prefix + ".norm1", d);
  l.ffn1 = Linear::create(ps, prefix + ".ffn1", d, d_ffn, rng);
  l.ffn2 = Linear::create(ps, prefix + ".ffn2", d_ffn, d, rng);
  l.norm2 = LayerNorm::create(ps, prefix + ".norm2", d);
  l.drop.p = dropout_p;
  return l;
}

Mat EncoderLayer::forward(const ParamStore& ps, const Mat& x, bool train,
                          Rng* rng, Cache& cache) const {
  const Mat a = attn.forward(ps, x, cache.attn);
  const Mat ad = drop.forward(a, train, rng, cache.drop1);
  cache.x1 = norm1.forward(ps, x + ad, cache.norm1);
  cache.ffn_pre = ffn1.forward(ps, cache.x1);
  const Mat h = cache.ffn_pre.cwiseMax(0.0);
  const Mat f = ffn2.forward(ps, h);
  const Mat fd = drop.forward(f, train, rng, cache.drop2);
  return norm2.forward(ps, cache.x1 + fd, cache.norm2);
}

Mat EncoderLayer::backward(ParamStore& ps, const Cache& cache, const Mat& dy) const {
  const Mat dsum2 = norm2.backward(ps, cache.norm2, dy);
  const Mat df = drop.backward(cache.drop2, dsum2);
  const Mat h = cache.ffn_pre.cwiseMax(0.0);
  const Mat dh = ffn2.backward(ps, h, df);
  const Mat dpre = (cache.ffn_pre.array() > 0.0).select(dh, 0.0);
  Mat dx1 = dsum2 + ffn1.backward(ps, cache.x1, dpre);
  const Mat dsum1 = norm1.backward(ps, cache.norm1, dx1);
  const Mat da = drop.backward(cache.drop1, dsum1);
  return dsum1 + attn.backward(ps, cache.attn, da);
}

// ---------------------------------------------------------------------------

Encoder Encoder::create(ParamStore& ps, const EncoderConfig& cfg, Rng& rng) {
  if (cfg.n_heads != 1) throw std::invalid_argument("only single-head attention is supported");
  Encoder enc;
  enc.cfg = cfg;
  for (int i = 0; i < cfg.n_layers; ++i)
    enc.layers.push_back(EncoderLayer::create(ps, "layer" + std::to_string(i),
                                              cfg.d_model, cfg.d_ffn,
                                              cfg.dropout_p, rng));
  return enc;
}

Mat Encoder::forward(const ParamStore& ps, const Mat& x, bool train, Rng* rng,
                     Cache& cache) const {
  cache.layers.resize(layers.size());
  Mat h = x;
  for (std::size_t i = 0; i < layers.size(); ++i)
    h = layers[i].forward(ps, h, train, rng, cache.layers[i]);
  return h;
}

Mat Encoder::backward(ParamStore& ps, const Cache& cache, const Mat& dy) const {
  Mat d = dy;
  for (std::size_t i = layers.size(); i-- > 0;)
    d = layers[i].backward(ps, cache.layers[i], d);
  return d;
}

// ---------------------------------------------------------------------------

MlpHead MlpHead::create(ParamStore& ps, const std::string& prefix,
                        const MlpHeadConfig& cfg, Rng& rng) {
  if (cfg.d_in < 16 || cfg.d_out <= 0) throw std::invalid_argument("mlp head dims too small");
  MlpHead head;
  std::vector<int> dims = cfg.hidden();
  int prev = cfg.d_in;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    head.fcs.push_back(Linear::create(ps, prefix + ".fc" + std::to_string(i), prev, dims[i], rng));
    prev = dims[i];
  }
  head.fcs.push_back(Linear::create(ps, prefix + ".fc" + std::to_string(dims.size()), prev, cfg.d_out, rng));
  return head;
}

Mat MlpHead::forward(const ParamStore& ps, const Mat& x, Cache& cache) const {
  const std::size_t n_hidden = fcs.size() - 1;
  cache.inputs.assign(fcs.size(), Mat());
  cache.pres.assign(n_hidden, Mat());
  Mat cur = x;
  for (std::size_t i = 0; i < n_hidden; ++i) {
    cache.inputs[i] = cur;
    cache.pres[i] = fcs[i].forward(ps, cur);
    cur = cache.pres[i].cwiseMax(0.0);
  }
  cache.inputs[n_hidden] = cur;
  return fcs[n_hidden].forward(ps, cur);
}

Mat MlpHead::backward(ParamStore& ps, const Cache& cache, const Mat& dy) const {
  const std::size_t n_hidden = fcs.size() - 1;
  Mat d = fcs[n_hidden].backward(ps, cache.inputs[n_hidden], dy);
  for (std::size_t i = n_hidden; i-- > 0;) {
    const Mat dpre = (cache.pres[i].array() > 0.0).select(d, 0.0);
    d = fcs[i].backward(ps, cache.inputs[i], dpre);
  }
  return d;
}

// ---------------------------------------------------------------------------

double one_cycle_lr(const OptimizerConfig& cfg, double pos) {
  pos = std::clamp(pos, 0.0, 1.0);
  const double start = cfg.start_frac * cfg.peak_lr;
  if (cfg.warmup_frac > 0.0 && pos <= cfg.warmup_frac) {
    const double t = pos / cfg.warmup_frac;
    return start + (cfg.peak_lr - start) * 0.5 * (1.0 - std::cos(M_PI * t));
  }
  const double span = 1.0 - cfg.warmup_frac;
  const double t = span > 0.0 ? (pos - cfg.warmup_frac) / span : 1.0;
  return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

void optimizer_step(ParamStore& ps, const OptimizerConfig& cfg, double pos) {
  const double lr = one_cycle_lr(cfg, pos);
  double clip_scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (int i = 0; i < ps.count(); ++i) sq += ps.grad(i).squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
  }
  for (int i = 0; i < ps.count(); ++i) {
    if (!ps.grad(i).allFinite())
      throw TrainingError("non-finite gradient in parameter " + ps.name(i));
    Mat g = ps.grad(i) * clip_scale;
    if (cfg.weight_decay > 0.0) g += cfg.weight_decay * ps.value(i);
    ps.momentum(i) = cfg.momentum * ps.momentum(i) + g;
    ps.value(i) -= lr * ps.momentum(i);
  }
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(ParamStore& ps,
                           const std::function<double()>& loss_and_grad,
                           const std::function<double()>& loss_only, double eps,
                           Rng& rng, std::size_t max_coords) {
  const double f0 = loss_and_grad();
  std::vector<Mat> analytic;
  analytic.reserve(ps.count());
  for (int i = 0; i < ps.count(); ++i) analytic.push_back(ps.grad(i));

  struct Coord {
    int param;
    Eigen::Index r, c;
  };
  std::vector<Coord> coords;
  coords.reserve(ps.coefficient_count());
  for (int i = 0; i < ps.count(); ++i)
    for (Eigen::Index r = 0; r < ps.value(i).rows(); ++r)
      for (Eigen::Index c = 0; c < ps.value(i).cols(); ++c)
        coords.push_back({i, r, c});
  if (coords.size() > max_coords) {
    // Partial Fisher-Yates: the first max_coords entries become the sample.
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j = i + rng.uniform_index(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }

  GradCheckReport rep;
  double sum_rel = 0.0;
  // Central differences cannot resolve below cancellation noise, which is
  // ~machine-eps * |loss| / eps; differences under that bound carry no
  // information about the analytic gradient.
  const double fd_noise = 16.0 * std::numeric_limits<double>::epsilon() *
                          std::max(std::abs(f0), 1.0) / eps;
  for (const Coord& cd : coords) {
    double& val = ps.value(cd.param)(cd.r, cd.c);
    const double orig = val;
    auto fd_at = [&](double e) {
      val = orig + e;
      const double fp = loss_only();
      val = orig - e;
      const double fm = loss_only();
      val = orig;
      return (fp - fm) / (2.0 * e);
    };
    const double fd1 = fd_at(eps);
    const double fd2 = fd_at(eps / 2.0);
    // A kink between the probe points makes the two estimates disagree far
    // beyond the O(eps^2) truncation error of a smooth function.
    const double spread = std::abs(fd1 - fd2);
    if (spread > 1e-3 * std::max({std::abs(fd1), std::abs(fd2), 1e-6})) {
      ++rep.skipped_nonsmooth;
      continue;
    }
    const double ga = analytic[cd.param](cd.r, cd.c);
    const double diff = std::max(0.0, std::abs(ga - fd2) - fd_noise);
    const double rel = diff / std::max({std::abs(ga), std::abs(fd2), 1e-6});
    sum_rel += rel;
    ++rep.checked;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = ps.name(cd.param);
    }
  }
  rep.mean_rel_err = rep.checked > 0 ? sum_rel / rep.checked : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& dir, const ParamStore& ps,
                     const nlohmann::json& extra_manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest = extra_manifest;
  nlohmann::json params = nlohmann::json::array();
  std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write checkpoint params: " + dir);
  std::uint64_t offset = 0;
  for (int i = 0; i < ps.count(); ++i) {
    const Mat& v = ps.value(i);
    params.push_back({{"name", ps.name(i)},
                      {"rows", v.rows()},
                      {"cols", v.cols()},
                      {"offset", offset}});
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) {
        const double x = v(r, c);
        bin.write(reinterpret_cast<const char*>(&x), sizeof(double));
      }
    offset += static_cast<std::uint64_t>(v.size()) * sizeof(double);
  }
  bin.close();
  manifest["params"] = std::move(params);
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write checkpoint manifest: " + dir);
  mf << manifest.dump(2) << "\n";
}

nlohmann::json read_checkpoint_manifest(const std::string& dir) {
  std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot read checkpoint manifest: " + dir);
  return nlohmann::json::parse(mf);
}

void load_checkpoint_params(const std::string& dir, ParamStore& ps) {
  const nlohmann::json manifest = read_checkpoint_manifest(dir);
  std::ifstream bin(std::filesystem::path(dir) / "params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read checkpoint params: " + dir);
  std::size_t loaded = 0;
  for (const auto& p : manifest.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const int id = ps.find(name);
    if (id < 0) throw std::runtime_error("checkpoint has unknown parameter: " + name);
    Mat& v = ps.value(id);
    if (v.rows() != p.at("rows").get<Eigen::Index>() ||
        v.cols() != p.at("cols").get<Eigen::Index>())
      throw std::runtime_error("checkpoint shape mismatch for parameter: " + name);
    bin.seekg(static_cast<std::streamoff>(p.at("offset").get<std::uint64_t>()));
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) {
        double x = 0.0;
        bin.read(reinterpret_cast<char*>(&x), sizeof(double));
        if (!bin) throw std::runtime_error("checkpoint params truncated at parameter: " + name);
        v(r, c) = x;
      }
    ++loaded;
  }
  if (loaded != static_cast<std::size_t>(ps.count()))
    throw std::runtime_error("checkpoint is missing parameters");
}

}  // namespace pf
