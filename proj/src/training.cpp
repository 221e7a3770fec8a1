// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "blendfields/parallel.hpp"

namespace blendfields {

void validate(const TrainConfig& c) {
  if (c.batch_rays <= 0 || c.n_coarse <= 0 || c.n_importance < 0 || c.total_steps < 0 || c.lr_decay_steps <= 0)
    throw ConfigError("training counts must be positive");
  if (!(c.lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(c.lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0) || !(c.eps > 0.0))
    throw ConfigError("invalid Adam constants");
  if (!(c.sparsity_weight >= 0.0)) throw ConfigError("sparsity_weight must be >= 0");
  if (!(c.residual_lr_scale >= 0.0)) throw ConfigError("residual_lr_scale must be >= 0");
}

double learning_rate(const TrainConfig& c, std::int64_t step) {
  const double x = static_cast<double>(step) / c.lr_decay_steps;
  return c.lr * std::pow(c.lr_decay_factor, c.lr_staircase ? std::floor(x) : x);
}

TrainingSet::TrainingSet(const TetCage& cage, std::vector<Frame> frames, std::size_t expressions)
    : cage_(&cage), frames_(std::move(frames)), expressions_(expressions) {
  if (frames_.empty()) throw DimensionMismatch("training set has no frames");
  for (const Frame& f : frames_) {
    validate_deformed(cage, f.deformed);
    if (f.cameras.empty() || f.cameras.size() != f.images.size())
      throw DimensionMismatch("frame " + f.id + " needs one image per camera");
    for (std::size_t c = 0; c < f.cameras.size(); ++c) {
      if (f.images[c].width != f.cameras[c].width || f.images[c].height != f.cameras[c].height)
        throw DimensionMismatch("frame " + f.id + ": image size does not match camera");
    }
    if (f.expression != kNeutral && (f.expression < 0 || static_cast<std::size_t>(f.expression) >= expressions))
      throw DimensionMismatch("frame " + f.id + ": expression index out of range");
    bvhs_.push_back(std::make_unique<TetBVH>(cage, f.deformed));
  }
}

Eigen::VectorXd training_alpha(const Frame& frame, std::size_t expressions) {
  Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(expressions));
  if (frame.expression != kNeutral) a[frame.expression] = 1.0;
  return a;
}

double rgb_loss(std::span<const Vec3> predicted, std::span<const Vec3> target) {
  if (predicted.size() != target.size()) throw DimensionMismatch("rgb_loss needs equal batch sizes");
  if (predicted.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) acc += (predicted[i] - target[i]).squaredNorm();
  return acc / static_cast<double>(predicted.size());
}

AdamState init_adam(const RadianceModel& model) { return {zeros_like(model), zeros_like(model)}; }

Aabb model_box(const TetCage& cage, double padding) {
  Aabb box = cage.rest_bounds();
  const Vec3 pad = padding * box.extent();
  box.lo -= pad;
  box.hi += pad;
  return box;
}

std::string format_log_line(const StepStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld, %.9g, %.9g, %.9g, %.6f", static_cast<long long>(s.step), s.lr, s.loss_rgb,
                s.loss_sparsity, s.psnr_train);
  return buf;
}

Trainer::Trainer(RadianceModel model, const TrainingSet& data, TrainConfig config, RenderSettings render, int workers)
    : model_(std::move(model)),
      adam_(init_adam(model_)),
      data_(&data),
      config_(config),
      render_(render),
      workers_(std::max(1, workers)) {
  validate(config_);
  if (model_.expression_count() != data.expression_count())
    throw DimensionMismatch("model and training set disagree on the expression count");
  render_.n_coarse = config_.n_coarse;
  render_.n_importance = config_.n_importance;
  render_.seed = config_.seed;
}

Trainer::Partial Trainer::run_batch(std::int64_t step, std::vector<ModelGradient>* grads) const {
  const std::size_t fi = static_cast<std::size_t>(step % static_cast<std::int64_t>(data_->size()));
  const Frame& frame = data_->frame(fi);
  SceneView view;
  view.model = &model_;
  view.cage = &data_->cage();
  view.deformed = &frame.deformed;
  view.bvh = &data_->bvh(fi);
  view.constant_alpha = training_alpha(frame, data_->expression_count());

  const int workers = grads ? static_cast<int>(grads->size()) : 1;
  std::vector<Partial> partial(static_cast<std::size_t>(workers));
  const double inv_b = 1.0 / config_.batch_rays;
  parallel_chunks(static_cast<std::size_t>(config_.batch_rays), workers, [&](int w, std::size_t r0, std::size_t r1) {
    Partial& acc = partial[static_cast<std::size_t>(w)];
    for (std::size_t r = r0; r < r1; ++r) {
      Rng rng = Rng::keyed(config_.seed, static_cast<std::uint64_t>(step), r, 0x7a);
      const std::size_t cam = rng.below(frame.cameras.size());
      const Camera& c = frame.cameras[cam];
      const int px = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.width)));
      const int py = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.height)));
      const TracedRay tr = trace_ray(view, render_, pixel_ray(c, px, py, render_.bounds), RenderMode::kTrain, rng);
      const Vec3 diff = tr.rgb - frame.images[cam].at(px, py);
      acc.rgb += diff.squaredNorm() * inv_b;
      double sigma_extra = 0.0;
      if (config_.sparsity_weight > 0.0 && tr.composite.used > 0) {
        double s = 0.0;
        for (std::size_t i = 0; i < tr.composite.used; ++i) s += tr.samples[i].eval.sigma;
        const double n = static_cast<double>(tr.composite.used);
        acc.sparsity += config_.sparsity_weight * s / n * inv_b;
        sigma_extra = config_.sparsity_weight / n * inv_b;
      }
      if (grads) accumulate_ray_gradient(view, tr, render_.background, 2.0 * inv_b * diff, sigma_extra, (*grads)[w]);
    }
  });
  Partial total;
  for (const Partial& p : partial) {
    total.rgb += p.rgb;
    total.sparsity += p.sparsity;
  }
  if (grads)
    for (std::size_t w = 1; w < grads->size(); ++w) (*grads)[0].merge_from((*grads)[w]);
  return total;
}

double Trainer::batch_loss(std::int64_t step, ModelGradient* grad) const {
  if (!grad) {
    const Partial p = run_batch(step, nullptr);
    return p.rgb + p.sparsity;
  }
  std::vector<ModelGradient> one;
  one.push_back(*grad);
  const Partial p = run_batch(step, &one);
  *grad = std::move(one.front());
  return p.rgb + p.sparsity;
}

void Trainer::apply_adam(const ModelGradient& grad, double lr, std::int64_t step) {
  const double t = static_cast<double>(step + 1);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  std::size_t g = 0;
  auto update = [&](VoxelGrid& p, VoxelGrid& m, VoxelGrid& v, double rate) {
    const VoxelGrid& d = grad.grid(g);
    const int ch = p.channels;
    for (std::int64_t node : grad.touched(g)) {
      for (int c = 0; c < ch; ++c) {
        const std::size_t i = static_cast<std::size_t>(node * ch + c);
        const double gi = d.values[i];
        m.values[i] = config_.beta1 * m.values[i] + (1.0 - config_.beta1) * gi;
        v.values[i] = config_.beta2 * v.values[i] + (1.0 - config_.beta2) * gi * gi;
        p.values[i] -= rate * (m.values[i] / bc1) / (std::sqrt(v.values[i] / bc2) + config_.eps);
      }
    }
    ++g;
  };
  update(model_.density, adam_.m.density, adam_.v.density, lr);
  update(model_.template_color, adam_.m.template_color, adam_.v.template_color, lr);
  for (std::size_t k = 0; k < model_.residuals.size(); ++k)
    update(model_.residuals[k], adam_.m.residuals[k], adam_.v.residuals[k], lr * config_.residual_lr_scale);
}

StepStats Trainer::step(std::int64_t step) {
  if (grads_.empty())
    for (int w = 0; w < workers_; ++w) grads_.emplace_back(model_);
  for (ModelGradient& g : grads_) g.clear();
  const Partial p = run_batch(step, &grads_);
  StepStats s;
  s.step = step;
  s.lr = learning_rate(config_, step);
  s.loss_rgb = p.rgb;
  s.loss_sparsity = p.sparsity;
  if (!std::isfinite(p.rgb) || !std::isfinite(p.sparsity)) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "non-finite loss at step %lld (frame %s): rgb=%g sparsity=%g",
                  static_cast<long long>(step), data_->frame(static_cast<std::size_t>(step % data_->size())).id.c_str(),
                  p.rgb, p.sparsity);
    throw NonFiniteLoss(buf);
  }
  s.psnr_train = p.rgb > 0.0 ? 10.0 * std::log10(3.0 / p.rgb) : 99.0;
  apply_adam(grads_.front(), s.lr, step);
  return s;
}

// --- checkpoints ------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'B', 'F', 'C', 'K', 'P', 'T', '\r', '\n'};

class Writer {
 public:
  std::vector<unsigned char> bytes;

  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : bytes_(b) {}

  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  void raw(void* out, std::size_t n) {
    if (n > bytes_.size() - pos_) throw CorruptFile("checkpoint truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

void write_grid(Writer& w, const VoxelGrid& p, const VoxelGrid& m, const VoxelGrid& v) {
  w.pod<std::int32_t>(p.shape.nx);
  w.pod<std::int32_t>(p.shape.ny);
  w.pod<std::int32_t>(p.shape.nz);
  w.pod<std::int32_t>(p.channels);
  for (int i = 0; i < 3; ++i) w.pod<double>(p.bbox.lo[i]);
  for (int i = 0; i < 3; ++i) w.pod<double>(p.bbox.hi[i]);
  for (const VoxelGrid* g : {&p, &m, &v}) w.raw(g->values.data(), g->values.size() * sizeof(double));
}

void read_grid(Reader& r, VoxelGrid& p, VoxelGrid& m, VoxelGrid& v) {
  GridShape s;
  s.nx = r.pod<std::int32_t>();
  s.ny = r.pod<std::int32_t>();
  s.nz = r.pod<std::int32_t>();
  const int ch = r.pod<std::int32_t>();
  Aabb box;
  for (int i = 0; i < 3; ++i) box.lo[i] = r.pod<double>();
  for (int i = 0; i < 3; ++i) box.hi[i] = r.pod<double>();
  if (s.nx < 2 || s.ny < 2 || s.nz < 2 || ch < 1 || ch > 3 ||
      static_cast<double>(s.nodes()) * ch * 3 * sizeof(double) > static_cast<double>(r.remaining()))
    throw CorruptFile("checkpoint grid header is inconsistent");
  p = VoxelGrid(s, box, ch);
  m = VoxelGrid(s, box, ch);
  v = VoxelGrid(s, box, ch);
  for (VoxelGrid* g : {&p, &m, &v}) r.raw(g->values.data(), g->values.size() * sizeof(double));
}

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::int64_t>(ckpt.step);
  w.pod<std::uint64_t>(ckpt.metadata.size());
  w.raw(ckpt.metadata.data(), ckpt.metadata.size());
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ckpt.model.residuals.size()));
  write_grid(w, ckpt.model.density, ckpt.adam.m.density, ckpt.adam.v.density);
  write_grid(w, ckpt.model.template_color, ckpt.adam.m.template_color, ckpt.adam.v.template_color);
  for (std::size_t k = 0; k < ckpt.model.residuals.size(); ++k)
    write_grid(w, ckpt.model.residuals[k], ckpt.adam.m.residuals[k], ckpt.adam.v.residuals[k]);
  w.pod<std::uint32_t>(crc_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CorruptFile("not a checkpoint file");
  Reader r(bytes);
  char magic[sizeof(kMagic)];
  r.raw(magic, sizeof(magic));
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  if (bytes.size() < sizeof(kMagic) + 8) throw CorruptFile("checkpoint truncated");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(bytes.data(), bytes.size() - 4) != stored) throw CorruptFile("checkpoint checksum mismatch");

  Reader body(bytes.first(bytes.size() - 4));
  body.raw(magic, sizeof(magic));
  body.pod<std::uint32_t>();
  Checkpoint ckpt;
  ckpt.step = body.pod<std::int64_t>();
  const auto meta = body.pod<std::uint64_t>();
  if (meta > body.remaining()) throw CorruptFile("checkpoint metadata truncated");
  ckpt.metadata.resize(meta);
  body.raw(ckpt.metadata.data(), meta);
  const auto k = body.pod<std::uint32_t>();
  if (k > 64) throw CorruptFile("checkpoint expression count is implausible");
  ckpt.model.residuals.resize(k);
  ckpt.adam.m.residuals.resize(k);
  ckpt.adam.v.residuals.resize(k);
  read_grid(body, ckpt.model.density, ckpt.adam.m.density, ckpt.adam.v.density);
  read_grid(body, ckpt.model.template_color, ckpt.adam.m.template_color, ckpt.adam.v.template_color);
  for (std::uint32_t i = 0; i < k; ++i)
    read_grid(body, ckpt.model.residuals[i], ckpt.adam.m.residuals[i], ckpt.adam.v.residuals[i]);
  if (body.remaining() != 0) throw CorruptFile("checkpoint has trailing data");
  const auto same_layout = [&](const VoxelGrid& g, int ch) {
    return g.shape == ckpt.model.density.shape && g.channels == ch;
  };
  bool ok = ckpt.model.density.channels == 1 && same_layout(ckpt.model.template_color, 3);
  for (const VoxelGrid& g : ckpt.model.residuals) ok = ok && same_layout(g, 3);
  if (!ok) throw CorruptFile("checkpoint grids disagree in layout");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace blendfields
