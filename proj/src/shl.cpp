#include "bfly/shl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bfly/baselines.hpp"
#include "bfly/butterfly.hpp"
#include "bfly/pixelfly.hpp"

namespace bfly {

namespace {

namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

double ms_between(clock_type::time_point a, clock_type::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

std::string fmt_g(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

std::vector<float> colsum(const Matrix<float>& m) {
  std::vector<float> s(static_cast<std::size_t>(m.cols), 0.0f);
  for (index_t r = 0; r < m.rows; ++r)
    for (index_t c = 0; c < m.cols; ++c) s[static_cast<std::size_t>(c)] += m(r, c);
  return s;
}

// construction-time key/value lines from a checkpoint header
struct KvConfig {
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
    return nullptr;
  }
};

Permutation parse_perm(const std::string& text) {
  Permutation p;
  std::istringstream is(text);
  index_t v;
  while (is >> v) p.map.push_back(v);
  if (!p.is_bijection()) throw std::runtime_error("checkpoint: stored permutation is not a bijection");
  return p;
}

void write_perm(std::ostream& os, const Permutation& p) {
  os << "cfg perm";
  for (const index_t v : p.map) os << ' ' << v;
  os << '\n';
}

// ---------------------------------------------------------------------------
// First-layer wrappers: each owns the math layer, its gradient buffers, the
// momentum buffers and the forward cache.
// ---------------------------------------------------------------------------

class DenseFirst final : public FirstLayer {
 public:
  DenseFirst(index_t out, index_t in, Rng& rng) : layer_(dense_new<float>(out, in, rng, true)) {
    grads_.weight = Matrix<float>(out, in);
    grads_.bias.assign(static_cast<std::size_t>(out), 0.0f);
    vel_w_ = Matrix<float>(out, in);
    vel_b_.assign(static_cast<std::size_t>(out), 0.0f);
  }

  std::string method() const override { return "baseline"; }
  index_t in_dim() const override { return layer_.in_dim(); }
  index_t out_dim() const override { return layer_.out_dim(); }
  index_t param_count() const override { return layer_.param_count(); }

  Matrix<float> forward(const Matrix<float>& x) override { return dense_forward(layer_, x, cache_); }

  Matrix<float> backward(const Matrix<float>& upstream) override {
    auto g = dense_backward(layer_, cache_, upstream);
    grads_.weight = std::move(g.weight);
    grads_.bias = std::move(g.bias);
    return std::move(g.input);
  }

  void for_each_param(const std::function<void(ParamBlock)>& fn) override {
    fn({"weight", layer_.weight.data, grads_.weight.data, vel_w_.data});
    fn({"bias", layer_.bias, grads_.bias, vel_b_});
  }

 private:
  DenseLinearLayer<float> layer_;
  DenseCache<float> cache_;
  DenseGrads<float> grads_;
  Matrix<float> vel_w_;
  std::vector<float> vel_b_;
};

// Butterfly first layer: the core factor stack works on the next power of two;
// inputs are zero-padded and outputs truncated, with a separate output bias.
class ButterflyFirst final : public FirstLayer {
 public:
  ButterflyFirst(index_t in, index_t out, Rng& rng, const KvConfig* cfg) : in_(in), out_(out) {
    const index_t npad = next_pow2(std::max(in, out));
    inner_ = butterfly_new<float>(npad, ButterflyInit::Givens, rng);
    inner_.perm = bit_reversal_permutation(npad);
    if (cfg)
      if (const auto* p = cfg->find("perm")) inner_.perm = parse_perm(*p);
    bias_.assign(static_cast<std::size_t>(out), 0.0f);
    grads_.level_coeffs.resize(inner_.levels.size());
    vel_levels_.resize(inner_.levels.size());
    for (std::size_t l = 0; l < inner_.levels.size(); ++l) {
      grads_.level_coeffs[l].assign(inner_.levels[l].coeffs.size(), 0.0f);
      vel_levels_[l].assign(inner_.levels[l].coeffs.size(), 0.0f);
    }
    grad_bias_.assign(bias_.size(), 0.0f);
    vel_bias_.assign(bias_.size(), 0.0f);
  }

  std::string method() const override { return "butterfly"; }
  index_t in_dim() const override { return in_; }
  index_t out_dim() const override { return out_; }
  index_t param_count() const override {
    return inner_.param_count() + static_cast<index_t>(bias_.size());
  }

  Matrix<float> forward(const Matrix<float>& x) override {
    if (x.cols != in_)
      throw std::invalid_argument("butterfly layer: input width " + std::to_string(x.cols) +
                                  " != " + std::to_string(in_));
    Matrix<float> xp(x.rows, inner_.n);
    for (index_t s = 0; s < x.rows; ++s)
      std::copy(x.row(s).begin(), x.row(s).end(), xp.row(s).begin());
    const Matrix<float> yp = butterfly_forward(inner_, xp, cache_);
    Matrix<float> y(x.rows, out_);
    for (index_t s = 0; s < x.rows; ++s)
      for (index_t i = 0; i < out_; ++i) y(s, i) = yp(s, i) + bias_[static_cast<std::size_t>(i)];
    return y;
  }

  Matrix<float> backward(const Matrix<float>& upstream) override {
    grad_bias_ = colsum(upstream);
    Matrix<float> up(upstream.rows, inner_.n);
    for (index_t s = 0; s < upstream.rows; ++s)
      std::copy(upstream.row(s).begin(), upstream.row(s).end(), up.row(s).begin());
    auto g = butterfly_backward(inner_, cache_, up);
    grads_.level_coeffs = std::move(g.level_coeffs);
    Matrix<float> dx(upstream.rows, in_);
    for (index_t s = 0; s < upstream.rows; ++s)
      for (index_t i = 0; i < in_; ++i) dx(s, i) = g.input(s, i);
    return dx;
  }

  void for_each_param(const std::function<void(ParamBlock)>& fn) override {
    for (std::size_t l = 0; l < inner_.levels.size(); ++l) {
      names_.resize(inner_.levels.size());
      if (names_[l].empty()) names_[l] = "level" + std::to_string(l);
      fn({names_[l].c_str(), inner_.levels[l].coeffs, grads_.level_coeffs[l], vel_levels_[l]});
    }
    fn({"bias", bias_, grad_bias_, vel_bias_});
  }

  void write_config(std::ostream& os) const override {
    os << "cfg npad " << inner_.n << '\n';
    write_perm(os, inner_.perm);
  }

 private:
  index_t in_, out_;
  ButterflyLayer<float> inner_;
  std::vector<float> bias_;
  ButterflyCache<float> cache_;
  ButterflyGrads<float> grads_;
  std::vector<std::vector<float>> vel_levels_;
  std::vector<float> grad_bias_, vel_bias_;
  std::vector<std::string> names_;
};

class PixelflyFirst final : public FirstLayer {
 public:
  PixelflyFirst(index_t in, index_t out, index_t block, index_t rank, int levels, Rng& rng) {
    if (in != out)
      throw std::invalid_argument("pixelfly layer requires in == out, got " + shape_str(out, in));
    layer_ = pixelfly_new<float>(out, block, rank, PixelflyInit::Uniform, rng, levels);
    layer_.bias.assign(static_cast<std::size_t>(out), 0.0f);
    grads_.sparse_values.assign(layer_.sparse_values.size(), 0.0f);
    vel_sparse_.assign(layer_.sparse_values.size(), 0.0f);
    if (layer_.rank() > 0) {
      grads_.low_rank_u = Matrix<float>(out, layer_.rank());
      grads_.low_rank_v = Matrix<float>(layer_.rank(), out);
      vel_u_ = Matrix<float>(out, layer_.rank());
      vel_v_ = Matrix<float>(layer_.rank(), out);
    }
    grads_.bias.assign(layer_.bias.size(), 0.0f);
    vel_bias_.assign(layer_.bias.size(), 0.0f);
  }

  std::string method() const override { return "pixelfly"; }
  index_t in_dim() const override { return layer_.n; }
  index_t out_dim() const override { return layer_.n; }
  index_t param_count() const override {
    return layer_.param_count() + static_cast<index_t>(layer_.bias.size());
  }

  Matrix<float> forward(const Matrix<float>& x) override {
    return pixelfly_forward(layer_, x, cache_);
  }

  Matrix<float> backward(const Matrix<float>& upstream) override {
    auto g = pixelfly_backward(layer_, cache_, upstream);
    grads_.sparse_values = std::move(g.sparse_values);
    grads_.low_rank_u = std::move(g.low_rank_u);
    grads_.low_rank_v = std::move(g.low_rank_v);
    grads_.bias = std::move(g.bias);
    return std::move(g.input);
  }

  void for_each_param(const std::function<void(ParamBlock)>& fn) override {
    fn({"sparse", layer_.sparse_values, grads_.sparse_values, vel_sparse_});
    if (layer_.rank() > 0) {
      fn({"lowrank_u", layer_.low_rank_u.data, grads_.low_rank_u.data, vel_u_.data});
      fn({"lowrank_v", layer_.low_rank_v.data, grads_.low_rank_v.data, vel_v_.data});
    }
    fn({"bias", layer_.bias, grads_.bias, vel_bias_});
  }

  void write_config(std::ostream& os) const override {
    os << "cfg block " << layer_.mask.block << '\n';
    os << "cfg rank " << layer_.rank() << '\n';
    os << "cfg levels " << layer_.mask.levels << '\n';
  }

  const PixelflyLayer<float>& layer() const { return layer_; }

 private:
  PixelflyLayer<float> layer_;
  PixelflyCache<float> cache_;
  PixelflyGrads<float> grads_;
  std::vector<float> vel_sparse_, vel_bias_;
  Matrix<float> vel_u_, vel_v_;
};

class LowRankFirst final : public FirstLayer {
 public:
  LowRankFirst(index_t in, index_t out, index_t rank, Rng& rng)
      : layer_(lowrank_new<float>(out, in, rank, rng, true)) {
    if (layer_.rank() > 0) {
      grads_.u = Matrix<float>(out, layer_.rank());
      grads_.v = Matrix<float>(layer_.rank(), in);
      vel_u_ = Matrix<float>(out, layer_.rank());
      vel_v_ = Matrix<float>(layer_.rank(), in);
    }
    grads_.bias.assign(layer_.bias.size(), 0.0f);
    vel_bias_.assign(layer_.bias.size(), 0.0f);
  }

  std::string method() const override { return "lowrank"; }
  index_t in_dim() const override { return layer_.in; }
  index_t out_dim() const override { return layer_.out; }
  index_t param_count() const override { return layer_.param_count(); }

  Matrix<float> forward(const Matrix<float>& x) override { return lowrank_forward(layer_, x, cache_); }

  Matrix<float> backward(const Matrix<float>& upstream) override {
    auto g = lowrank_backward(layer_, cache_, upstream);
    grads_.u = std::move(g.u);
    grads_.v = std::move(g.v);
    grads_.bias = std::move(g.bias);
    return std::move(g.input);
  }

  void for_each_param(const std::function<void(ParamBlock)>& fn) override {
    if (layer_.rank() > 0) {
      fn({"u", layer_.u.data, grads_.u.data, vel_u_.data});
      fn({"v", layer_.v.data, grads_.v.data, vel_v_.data});
    }
    fn({"bias", layer_.bias, grads_.bias, vel_bias_});
  }

  void write_config(std::ostream& os) const override {
    os << "cfg rank " << layer_.rank() << '\n';
  }

 private:
  LowRankLayer<float> layer_;
  LowRankCache<float> cache_;
  LowRankGrads<float> grads_;
  Matrix<float> vel_u_, vel_v_;
  std::vector<float> vel_bias_;
};

class CirculantFirst final : public FirstLayer {
 public:
  CirculantFirst(index_t in, index_t out, Rng& rng) {
    if (in != out)
      throw std::invalid_argument("circulant layer requires in == out, got " + shape_str(out, in));
    layer_ = circulant_new<float>(out, rng, true);
    grads_.c.assign(layer_.c.size(), 0.0f);
    grads_.bias.assign(layer_.bias.size(), 0.0f);
    vel_c_.assign(layer_.c.size(), 0.0f);
    vel_bias_.assign(layer_.bias.size(), 0.0f);
  }

  std::string method() const override { return "circulant"; }
  index_t in_dim() const override { return layer_.dim(); }
  index_t out_dim() const override { return layer_.dim(); }
  index_t param_count() const override { return layer_.param_count(); }

  Matrix<float> forward(const Matrix<float>& x) override {
    return circulant_forward(layer_, x, cache_);
  }

  Matrix<float> backward(const Matrix<float>& upstream) override {
    auto g = circulant_backward(layer_, cache_, upstream);
    grads_.c = std::move(g.c);
    grads_.bias = std::move(g.bias);
    return std::move(g.input);
  }

  void for_each_param(const std::function<void(ParamBlock)>& fn) override {
    fn({"c", layer_.c, grads_.c, vel_c_});
    fn({"bias", layer_.bias, grads_.bias, vel_bias_});
  }

 private:
  CirculantLayer<float> layer_;
  CirculantCache<float> cache_;
  CirculantGrads<float> grads_;
  std::vector<float> vel_c_, vel_bias_;
};

class FastfoodFirst final : public FirstLayer {
 public:
  FastfoodFirst(index_t in, index_t out, Rng& rng, const KvConfig* cfg) {
    if (in != out)
      throw std::invalid_argument("fastfood layer requires in == out, got " + shape_str(out, in));
    layer_ = fastfood_new<float>(out, rng, true);
    if (cfg)
      if (const auto* p = cfg->find("perm")) layer_.perm = parse_perm(*p);
    grads_.scale.assign(layer_.scale.size(), 0.0f);
    grads_.gauss.assign(layer_.gauss.size(), 0.0f);
    grads_.sign.assign(layer_.sign.size(), 0.0f);
    grads_.bias.assign(layer_.bias.size(), 0.0f);
    vel_scale_.assign(layer_.scale.size(), 0.0f);
    vel_gauss_.assign(layer_.gauss.size(), 0.0f);
    vel_sign_.assign(layer_.sign.size(), 0.0f);
    vel_bias_.assign(layer_.bias.size(), 0.0f);
  }

  std::string method() const override { return "fastfood"; }
  index_t in_dim() const override { return layer_.dim(); }
  index_t out_dim() const override { return layer_.dim(); }
  index_t param_count() const override { return layer_.param_count(); }

  Matrix<float> forward(const Matrix<float>& x) override {
    return fastfood_forward(layer_, x, cache_);
  }

  Matrix<float> backward(const Matrix<float>& upstream) override {
    auto g = fastfood_backward(layer_, cache_, upstream);
    grads_.scale = std::move(g.scale);
    grads_.gauss = std::move(g.gauss);
    grads_.sign = std::move(g.sign);
    grads_.bias = std::move(g.bias);
    return std::move(g.input);
  }

  void for_each_param(const std::function<void(ParamBlock)>& fn) override {
    fn({"scale", layer_.scale, grads_.scale, vel_scale_});
    fn({"gauss", layer_.gauss, grads_.gauss, vel_gauss_});
    fn({"sign", layer_.sign, grads_.sign, vel_sign_});
    fn({"bias", layer_.bias, grads_.bias, vel_bias_});
  }

  void write_config(std::ostream& os) const override { write_perm(os, layer_.perm); }

 private:
  FastfoodLayer<float> layer_;
  FastfoodCache<float> cache_;
  FastfoodGrads<float> grads_;
  std::vector<float> vel_scale_, vel_gauss_, vel_sign_, vel_bias_;
};

std::unique_ptr<FirstLayer> make_first_layer_impl(const std::string& method,
                                                  const LayerOptions& opts, Rng& rng,
                                                  const KvConfig* cfg) {
  if (method == "baseline") return std::make_unique<DenseFirst>(opts.out, opts.in, rng);
  if (method == "butterfly") return std::make_unique<ButterflyFirst>(opts.in, opts.out, rng, cfg);
  if (method == "pixelfly") {
    const index_t rank = opts.rank < 0 ? 32 : opts.rank;
    return std::make_unique<PixelflyFirst>(opts.in, opts.out, opts.block, rank, opts.levels, rng);
  }
  if (method == "lowrank") {
    const index_t rank = opts.rank < 0 ? 4 : opts.rank;
    return std::make_unique<LowRankFirst>(opts.in, opts.out, rank, rng);
  }
  if (method == "circulant") return std::make_unique<CirculantFirst>(opts.in, opts.out, rng);
  if (method == "fastfood") return std::make_unique<FastfoodFirst>(opts.in, opts.out, rng, cfg);
  std::string valid;
  for (const auto& m : shl_method_names()) valid += (valid.empty() ? "" : ", ") + m;
  throw std::invalid_argument("unknown method '" + method + "' (valid: " + valid + ")");
}

}  // namespace

void FirstLayer::write_config(std::ostream&) const {}

const std::vector<std::string>& shl_method_names() {
  static const std::vector<std::string> names{"baseline", "butterfly", "pixelfly",
                                              "lowrank",  "circulant", "fastfood"};
  return names;
}

std::unique_ptr<FirstLayer> make_first_layer(const std::string& method, const LayerOptions& opts,
                                             Rng& rng) {
  return make_first_layer_impl(method, opts, rng, nullptr);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

ShlModel::ShlModel(std::unique_ptr<FirstLayer> layer1, std::unique_ptr<FirstLayer> layer2)
    : layer1_(std::move(layer1)), layer2_(std::move(layer2)) {
  if (layer1_->out_dim() != layer2_->in_dim())
    throw std::invalid_argument("ShlModel: layer widths do not compose");
}

ShlModel ShlModel::make(const std::string& method, const LayerOptions& opts, Rng& rng) {
  auto l1 = make_first_layer(method, opts, rng);
  LayerOptions l2opts;
  l2opts.in = opts.out;
  l2opts.out = kShlClasses;
  auto l2 = make_first_layer("baseline", l2opts, rng);
  return ShlModel(std::move(l1), std::move(l2));
}

Matrix<float> ShlModel::forward(const Matrix<float>& x) {
  const auto t0 = clock_type::now();
  hidden_pre_ = layer1_->forward(x);
  layer1_ms_ += ms_between(t0, clock_type::now());
  Matrix<float> act = hidden_pre_;
  for (auto& v : act.data) v = v > 0.0f ? v : 0.0f;
  return layer2_->forward(act);
}

Matrix<float> ShlModel::backward(const Matrix<float>& dlogits) {
  Matrix<float> dact = layer2_->backward(dlogits);
  for (std::size_t i = 0; i < dact.data.size(); ++i)
    if (hidden_pre_.data[i] <= 0.0f) dact.data[i] = 0.0f;
  const auto t0 = clock_type::now();
  Matrix<float> dx = layer1_->backward(dact);
  layer1_ms_ += ms_between(t0, clock_type::now());
  return dx;
}

void ShlModel::sgd_step(float lr, float momentum) {
  const auto step = [lr, momentum](ParamBlock b) {
    sgd_momentum_step<float>(b.w, std::span<const float>(b.g.data(), b.g.size()), b.v, lr, momentum);
  };
  layer1_->for_each_param(step);
  layer2_->for_each_param(step);
}

double ShlModel::accuracy(const Matrix<float>& x, std::span<const int> labels, index_t row_begin,
                          index_t row_end) {
  if (row_end < 0) row_end = x.rows;
  if (row_end <= row_begin) return -1.0;
  index_t correct = 0;
  const index_t chunk = 256;
  for (index_t start = row_begin; start < row_end; start += chunk) {
    const index_t b = std::min(chunk, row_end - start);
    Matrix<float> xb(b, x.cols);
    for (index_t s = 0; s < b; ++s)
      std::copy(x.row(start + s).begin(), x.row(start + s).end(), xb.row(s).begin());
    const Matrix<float> logits = forward(xb);
    for (index_t s = 0; s < b; ++s) {
      const auto row = logits.row(s);
      index_t best = 0;
      for (index_t j = 1; j < logits.cols; ++j)
        if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]) best = j;
      if (best == labels[static_cast<std::size_t>(start + s)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(row_end - row_begin);
}

ParamCountReport count_params(const ShlModel& model) {
  ParamCountReport r;
  r.method = model.method();
  r.layer1 = model.layer1().param_count();
  r.layer2 = model.layer2().param_count();
  r.total = r.layer1 + r.layer2;
  r.compression = 1.0 - static_cast<double>(r.total) / static_cast<double>(kBaselineShlParams);
  return r;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kCifarRecordBytes = 3073;
constexpr std::size_t kCifarPlane = 1024;

void read_cifar_file(const fs::path& path, Matrix<float>& x, std::vector<int>& y, index_t& row) {
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  for (std::size_t rec = 0; rec < n; ++rec) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + rec * kCifarRecordBytes;
    const int label = p[0];
    if (label > 9)
      throw std::runtime_error("load_cifar10: invalid label " + std::to_string(label) + " in " +
                               path.string() + " record " + std::to_string(rec));
    y[static_cast<std::size_t>(row)] = label;
    auto dst = x.row(row);
    for (std::size_t i = 0; i < kCifarPlane; ++i) {
      const unsigned r = p[1 + i];
      const unsigned g = p[1 + kCifarPlane + i];
      const unsigned b = p[1 + 2 * kCifarPlane + i];
      dst[i] = static_cast<float>(r + g + b) / 765.0f;  // channel mean / 255
    }
    ++row;
  }
}

std::size_t cifar_file_records(const fs::path& path) {
  const std::uintmax_t size = fs::file_size(path);
  if (size == 0 || size % kCifarRecordBytes != 0)
    throw std::runtime_error("load_cifar10: " + path.string() + " has " + std::to_string(size) +
                             " bytes, not a multiple of " + std::to_string(kCifarRecordBytes));
  return static_cast<std::size_t>(size / kCifarRecordBytes);
}

}  // namespace

Dataset load_cifar10(const std::string& dir) {
  const fs::path root(dir);
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i) {
    const fs::path p = root / ("data_batch_" + std::to_string(i) + ".bin");
    if (fs::exists(p)) train_files.push_back(p);
  }
  if (train_files.empty())
    throw std::runtime_error("load_cifar10: no data_batch_*.bin files in " + dir);

  std::size_t total = 0;
  for (const auto& p : train_files) total += cifar_file_records(p);

  Dataset ds;
  ds.train_x = Matrix<float>(static_cast<index_t>(total), kShlInputDim);
  ds.train_y.resize(total);
  index_t row = 0;
  for (const auto& p : train_files) read_cifar_file(p, ds.train_x, ds.train_y, row);

  const fs::path test_path = root / "test_batch.bin";
  if (fs::exists(test_path)) {
    const std::size_t n_test = cifar_file_records(test_path);
    ds.test_x = Matrix<float>(static_cast<index_t>(n_test), kShlInputDim);
    ds.test_y.resize(n_test);
    index_t trow = 0;
    read_cifar_file(test_path, ds.test_x, ds.test_y, trow);
  }
  return ds;
}

Dataset synthetic_dataset(index_t n_samples, int n_classes, Rng& rng, index_t n_test) {
  if (n_samples < n_classes)
    throw std::invalid_argument("synthetic_dataset: need at least one sample per class");
  Matrix<float> means(n_classes, kShlInputDim);
  for (auto& v : means.data) v = static_cast<float>(rng.uniform(0.2, 0.8));

  const auto fill = [&](Matrix<float>& x, std::vector<int>& y, index_t count) {
    x = Matrix<float>(count, kShlInputDim);
    y.resize(static_cast<std::size_t>(count));
    for (index_t s = 0; s < count; ++s) {
      const int label = static_cast<int>(s % n_classes);
      y[static_cast<std::size_t>(s)] = label;
      auto row = x.row(s);
      const auto mu = means.row(label);
      for (index_t i = 0; i < kShlInputDim; ++i) {
        const double v = mu[static_cast<std::size_t>(i)] + 0.05 * rng.normal();
        row[static_cast<std::size_t>(i)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  };

  Dataset ds;
  fill(ds.train_x, ds.train_y, n_samples);
  if (n_test > 0) fill(ds.test_x, ds.test_y, n_test);
  return ds;
}

void carve_validation(Dataset& ds, double fraction, Rng& rng) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw std::invalid_argument("carve_validation: fraction must be in [0, 1)");
  const index_t n = ds.train_x.rows;
  std::vector<float> tmp(static_cast<std::size_t>(ds.train_x.cols));
  for (index_t i = n - 1; i > 0; --i) {
    const index_t j = static_cast<index_t>(rng.bounded(static_cast<std::uint64_t>(i + 1)));
    if (i == j) continue;
    auto ri = ds.train_x.row(i);
    auto rj = ds.train_x.row(j);
    std::copy(ri.begin(), ri.end(), tmp.begin());
    std::copy(rj.begin(), rj.end(), ri.begin());
    std::copy(tmp.begin(), tmp.end(), rj.begin());
    std::swap(ds.train_y[static_cast<std::size_t>(i)], ds.train_y[static_cast<std::size_t>(j)]);
  }
  ds.val_begin = n - std::llround(fraction * static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult train_shl(ShlModel& model, Dataset& ds, const TrainConfig& config) {
  Rng rng(config.seed);
  if (ds.val_begin < 0) {
    if (config.validation_fraction > 0.0)
      carve_validation(ds, config.validation_fraction, rng);
    else
      ds.val_begin = ds.train_x.rows;
  }
  const index_t n_train = ds.train_count();
  if (n_train == 0 && config.epochs > 0)
    throw std::invalid_argument("train_shl: no training samples");

  const index_t in_dim = model.layer1().in_dim();
  const auto t_start = clock_type::now();
  TrainResult result;

  std::vector<index_t> order(static_cast<std::size_t>(n_train));
  for (index_t i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (index_t i = n_train - 1; i > 0; --i) {
      const index_t j = static_cast<index_t>(rng.bounded(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    model.take_layer1_ms();
    double loss_sum = 0.0;
    index_t seen = 0;
    for (index_t start = 0; start < n_train; start += config.batch_size) {
      const index_t b = std::min<index_t>(config.batch_size, n_train - start);
      Matrix<float> xb(b, in_dim);
      std::vector<int> yb(static_cast<std::size_t>(b));
      for (index_t s = 0; s < b; ++s) {
        const index_t src = order[static_cast<std::size_t>(start + s)];
        std::copy(ds.train_x.row(src).begin(), ds.train_x.row(src).end(), xb.row(s).begin());
        yb[static_cast<std::size_t>(s)] = ds.train_y[static_cast<std::size_t>(src)];
      }
      const Matrix<float> logits = model.forward(xb);
      Matrix<float> dlogits;
      const double loss = cross_entropy_loss(logits, std::span<const int>(yb), &dlogits);
      if (!std::isfinite(loss))
        throw std::runtime_error("train_shl: training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      (void)model.backward(dlogits);
      model.sgd_step(config.learning_rate, config.momentum);
      loss_sum += loss * static_cast<double>(b);
      seen += b;
    }
    const double layer1_ms = model.take_layer1_ms();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.val_acc = ds.val_count() > 0
                      ? model.accuracy(ds.train_x, std::span<const int>(ds.train_y), ds.val_begin,
                                       ds.train_x.rows)
                      : -1.0;
    rec.layer1_ms = layer1_ms;
    rec.cum_s = std::chrono::duration<double>(clock_type::now() - t_start).count();
    result.history.push_back(rec);
  }

  result.val_acc = !result.history.empty()
                       ? result.history.back().val_acc
                       : (ds.val_count() > 0
                              ? model.accuracy(ds.train_x, std::span<const int>(ds.train_y),
                                               ds.val_begin, ds.train_x.rows)
                              : -1.0);
  result.test_acc = ds.test_x.rows > 0
                        ? model.accuracy(ds.test_x, std::span<const int>(ds.test_y))
                        : -1.0;
  result.total_s = std::chrono::duration<double>(clock_type::now() - t_start).count();
  return result;
}

std::string metrics_log(const TrainResult& result, bool include_timing) {
  std::string out = "epoch,train_loss,val_acc,test_acc,layer1_time_ms,cumulative_time_s\n";
  for (std::size_t i = 0; i < result.history.size(); ++i) {
    const auto& r = result.history[i];
    const bool last = i + 1 == result.history.size();
    out += std::to_string(r.epoch);
    out += ',' + fmt_g(r.train_loss);
    out += ',' + (r.val_acc >= 0.0 ? fmt_g(r.val_acc) : std::string());
    out += ',' + (last && result.test_acc >= 0.0 ? fmt_g(result.test_acc) : std::string());
    out += ',' + (include_timing ? fmt_g(r.layer1_ms, 6) : std::string());
    out += ',' + (include_timing ? fmt_g(r.cum_s, 6) : std::string());
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointMagic = "bfly-checkpoint";
constexpr int kCheckpointVersion = 1;

void write_blocks(std::ostream& os, FirstLayer& layer, const char* prefix,
                  std::vector<std::pair<std::string, std::span<float>>>& payload) {
  layer.for_each_param([&](ParamBlock b) {
    os << "block " << prefix << '.' << b.name << ' ' << b.w.size() << '\n';
    payload.emplace_back(std::string(prefix) + "." + b.name, b.w);
  });
}

}  // namespace

void save_checkpoint(const ShlModel& model, const CheckpointMeta& meta, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  auto& m = const_cast<ShlModel&>(model);

  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "method " << model.method() << '\n';
  os << "in " << model.layer1().in_dim() << '\n';
  os << "out " << model.layer1().out_dim() << '\n';
  os << "classes " << model.layer2().out_dim() << '\n';
  m.layer1().write_config(os);
  os << "seed " << meta.seed << '\n';
  os << "epoch " << meta.epoch << '\n';
  os << "lr " << fmt_g(meta.config.learning_rate) << '\n';
  os << "momentum " << fmt_g(meta.config.momentum) << '\n';
  os << "batch_size " << meta.config.batch_size << '\n';
  os << "val_fraction " << fmt_g(meta.config.validation_fraction, 17) << '\n';
  os << "test_acc " << fmt_g(meta.test_acc, 17) << '\n';
  os << "history " << meta.history.size() << '\n';
  for (const auto& r : meta.history)
    os << "h " << r.epoch << ' ' << fmt_g(r.train_loss, 17) << ' ' << fmt_g(r.val_acc, 17) << ' '
       << fmt_g(r.layer1_ms, 17) << ' ' << fmt_g(r.cum_s, 17) << '\n';

  std::vector<std::pair<std::string, std::span<float>>> payload;
  write_blocks(os, m.layer1(), "l1", payload);
  write_blocks(os, m.layer2(), "l2", payload);
  std::size_t total = 0;
  for (const auto& [name, span] : payload) total += span.size();
  os << "payload " << total << '\n';
  for (const auto& [name, span] : payload)
    os.write(reinterpret_cast<const char*>(span.data()),
             static_cast<std::streamsize>(span.size() * sizeof(float)));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);

  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("load_checkpoint: empty file");
  {
    std::istringstream hdr(line);
    std::string magic;
    int version = -1;
    hdr >> magic >> version;
    if (magic != kCheckpointMagic)
      throw std::runtime_error("load_checkpoint: not a checkpoint file");
    if (version != kCheckpointVersion)
      throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  }

  std::string method;
  LayerOptions opts;
  KvConfig cfg;
  CheckpointMeta meta;
  std::vector<std::pair<std::string, std::size_t>> blocks;
  std::size_t payload_count = 0;
  bool saw_payload = false;
  index_t classes = kShlClasses;

  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "method") {
      ls >> method;
    } else if (key == "in") {
      ls >> opts.in;
    } else if (key == "out") {
      ls >> opts.out;
    } else if (key == "classes") {
      ls >> classes;
    } else if (key == "cfg") {
      std::string name;
      ls >> name;
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
      cfg.entries.emplace_back(name, rest);
    } else if (key == "seed") {
      ls >> meta.seed;
    } else if (key == "epoch") {
      ls >> meta.epoch;
    } else if (key == "lr") {
      ls >> meta.config.learning_rate;
    } else if (key == "momentum") {
      ls >> meta.config.momentum;
    } else if (key == "batch_size") {
      ls >> meta.config.batch_size;
    } else if (key == "val_fraction") {
      ls >> meta.config.validation_fraction;
    } else if (key == "test_acc") {
      ls >> meta.test_acc;
    } else if (key == "history") {
      // count only; records follow as h-lines
    } else if (key == "h") {
      EpochRecord r;
      ls >> r.epoch >> r.train_loss >> r.val_acc >> r.layer1_ms >> r.cum_s;
      meta.history.push_back(r);
    } else if (key == "block") {
      std::string name;
      std::size_t len = 0;
      ls >> name >> len;
      blocks.emplace_back(name, len);
    } else if (key == "payload") {
      ls >> payload_count;
      saw_payload = true;
      break;
    } else if (!key.empty()) {
      throw std::runtime_error("load_checkpoint: unknown header key '" + key + "'");
    }
  }
  if (!saw_payload || method.empty())
    throw std::runtime_error("load_checkpoint: malformed header in " + path);

  if (const auto* r = cfg.find("rank")) opts.rank = std::stoll(*r);
  if (const auto* b = cfg.find("block")) opts.block = std::stoll(*b);
  if (const auto* l = cfg.find("levels")) opts.levels = std::stoi(*l);

  Rng rng(0);  // placeholder draws; every parameter is overwritten below
  auto l1 = make_first_layer_impl(method, opts, rng, &cfg);
  LayerOptions l2opts;
  l2opts.in = opts.out;
  l2opts.out = classes;
  auto l2 = make_first_layer_impl("baseline", l2opts, rng, nullptr);
  ShlModel model(std::move(l1), std::move(l2));

  std::vector<float> payload(payload_count);
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload_count * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != payload_count * sizeof(float))
    throw std::runtime_error("load_checkpoint: truncated payload in " + path);

  std::size_t cursor = 0;
  std::size_t block_idx = 0;
  const auto fill = [&](const char* prefix) {
    return [&, prefix](ParamBlock b) {
      if (block_idx >= blocks.size())
        throw std::runtime_error("load_checkpoint: missing block entry for " + std::string(b.name));
      const auto& [name, len] = blocks[block_idx++];
      if (name != std::string(prefix) + "." + b.name || len != b.w.size())
        throw std::runtime_error("load_checkpoint: block mismatch at " + name);
      if (cursor + len > payload.size())
        throw std::runtime_error("load_checkpoint: payload overrun");
      std::copy(payload.begin() + static_cast<std::ptrdiff_t>(cursor),
                payload.begin() + static_cast<std::ptrdiff_t>(cursor + len), b.w.begin());
      cursor += len;
    };
  };
  model.layer1().for_each_param(fill("l1"));
  model.layer2().for_each_param(fill("l2"));
  if (cursor != payload.size())
    throw std::runtime_error("load_checkpoint: payload size mismatch");

  return {std::move(model), std::move(meta)};
}

}  // namespace bfly
