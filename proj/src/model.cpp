#include "ucl/model.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ucl/blob_io.hpp"

namespace ucl {

EncoderProjectorModel EncoderProjectorModel::build(const ModelConfig& cfg, std::mt19937_64& rng) {
  EncoderProjectorModel m;
  m.cfg_ = cfg;
  m.f_ = build_backbone(cfg.backbone, rng);
  const Index d_e = m.f_->out_dim();
  m.g_ = Mlp::make(d_e, cfg.projector_hidden, cfg.projector_dim, rng);
  m.h_ = Mlp::make(d_e, cfg.projector_hidden, cfg.projector_dim, rng);
  if (cfg.with_predictor)
    m.m_ = Mlp::make(cfg.projector_dim, cfg.projector_hidden, cfg.projector_dim, rng);
  return m;
}

Var EncoderProjectorModel::encode(const Tensor& images) {
  UCL_CHECK(images.rank() == 4, "encode: images must be (N,C,H,W)");
  Var feats = f_->forward(Var(images), training_);
  if (!feats.value().all_finite())
    throw NumericsError("encode: non-finite backbone features");
  return feats;
}

Var EncoderProjectorModel::project_g(const Var& feats) const {
  return normalize_rows(g_.forward(feats));
}

Var EncoderProjectorModel::project_h(const Var& feats) const {
  return normalize_rows(h_.forward(feats));
}

Var EncoderProjectorModel::project_m(const Var& feats) const {
  UCL_CHECK(m_.has_value(), "project_m: model built without predictor head");
  return normalize_rows(m_->forward(g_.forward(feats)));
}

Tensor EncoderProjectorModel::encode_eval(const Tensor& images) {
  NoGradGuard off;
  const bool saved = training_;
  training_ = false;
  Var feats = encode(images);
  training_ = saved;
  return feats.value();
}

void EncoderProjectorModel::visit_params(ParamVisitor fn) {
  f_->visit("f", fn);
  g_.visit("g", fn);
  h_.visit("h", fn);
  if (m_) m_->visit("m", fn);
}

void EncoderProjectorModel::visit_buffers(BufferVisitor fn) { f_->visit_buffers("f", fn); }

std::vector<Var> EncoderProjectorModel::trainable_params() {
  std::vector<Var> out;
  visit_params([&](const std::string&, Var& v) {
    if (v.requires_grad()) out.push_back(v);
  });
  return out;
}

std::vector<Var> EncoderProjectorModel::group_params(const std::string& group) {
  std::vector<Var> out;
  visit_params([&](const std::string& name, Var& v) {
    if (name.rfind(group + ".", 0) == 0) out.push_back(v);
  });
  return out;
}

void EncoderProjectorModel::zero_grad() {
  visit_params([](const std::string&, Var& v) { v.zero_grad(); });
}

EncoderProjectorModel EncoderProjectorModel::clone(bool trainable) const {
  EncoderProjectorModel copy;
  copy.cfg_ = cfg_;
  copy.training_ = training_;
  copy.f_ = f_->clone(trainable);
  std::mt19937_64 scratch(0);
  const Index d_e = f_->out_dim();
  copy.g_ = Mlp::make(d_e, cfg_.projector_hidden, cfg_.projector_dim, scratch, trainable);
  copy.h_ = Mlp::make(d_e, cfg_.projector_hidden, cfg_.projector_dim, scratch, trainable);
  if (m_)
    copy.m_ = Mlp::make(cfg_.projector_dim, cfg_.projector_hidden, cfg_.projector_dim, scratch,
                        trainable);

  auto copy_mlp = [](const Mlp& src, Mlp& dst) {
    dst.fc1.w.value_mut().array() = src.fc1.w.value().array();
    dst.fc1.b.value_mut().array() = src.fc1.b.value().array();
    dst.fc2.w.value_mut().array() = src.fc2.w.value().array();
    dst.fc2.b.value_mut().array() = src.fc2.b.value().array();
  };
  copy_mlp(g_, copy.g_);
  copy_mlp(h_, copy.h_);
  if (m_) copy_mlp(*m_, *copy.m_);
  return copy;
}

// ---------------------------------------------------------------------------
// FrozenCheckpoint
// ---------------------------------------------------------------------------

FrozenCheckpoint freeze_checkpoint(const EncoderProjectorModel& model, bool include_g,
                                   int task_index) {
  FrozenCheckpoint ck;
  ck.task_index_ = task_index;
  ck.f_ = model.backbone().clone(false);
  if (include_g) {
    std::mt19937_64 scratch(0);
    const auto& cfg = model.config();
    Mlp g = Mlp::make(model.encoder_dim(), cfg.projector_hidden, cfg.projector_dim, scratch,
                      false);
    const Mlp& src = model.g_mlp();
    g.fc1.w.value_mut().array() = src.fc1.w.value().array();
    g.fc1.b.value_mut().array() = src.fc1.b.value().array();
    g.fc2.w.value_mut().array() = src.fc2.w.value().array();
    g.fc2.b.value_mut().array() = src.fc2.b.value().array();
    ck.g_ = std::move(g);
  }
  return ck;
}

Var FrozenCheckpoint::encode(const Tensor& images) const {
  UCL_CHECK(f_ != nullptr, "checkpoint: empty");
  // Parameters carry requires_grad=false, so nothing is recorded on the tape.
  Var feats = f_->forward(Var(images), /*training=*/false);
  if (!feats.value().all_finite())
    throw NumericsError("checkpoint encode: non-finite features");
  return feats;
}

Var FrozenCheckpoint::project_g(const Var& feats) const {
  UCL_CHECK(g_.has_value(), "checkpoint stores no g projector");
  return normalize_rows(g_->forward(feats));
}

void FrozenCheckpoint::save(BlobStore& store, const std::string& prefix) const {
  UCL_CHECK(f_ != nullptr, "saving an empty checkpoint");
  std::vector<std::int64_t> header = {task_index_, g_.has_value() ? 1 : 0};
  store.put_i64(prefix + "/header", header.data(), header.size());
  f_->visit(prefix + "/f", [&](const std::string& name, Var& v) {
    store.put_f64(name, v.value().data(), std::size_t(v.value().size()));
  });
  f_->visit_buffers(prefix + "/fb", [&](const std::string& name, Tensor& t) {
    store.put_f64(name, t.data(), std::size_t(t.size()));
  });
  if (g_) {
    const_cast<Mlp&>(*g_).visit(prefix + "/g", [&](const std::string& name, Var& v) {
      store.put_f64(name, v.value().data(), std::size_t(v.value().size()));
    });
  }
}

FrozenCheckpoint FrozenCheckpoint::load(const BlobStore& store, const std::string& prefix,
                                        const EncoderProjectorModel& reference) {
  auto header = store.get_i64(prefix + "/header");
  UCL_CHECK(header.size() == 2, "checkpoint blob header malformed");
  FrozenCheckpoint ck = freeze_checkpoint(reference, header[1] != 0, int(header[0]));
  ck.f_->visit(prefix + "/f", [&](const std::string& name, Var& v) {
    auto data = store.get_f64(name);
    UCL_CHECK(Index(data.size()) == v.value().size(), "checkpoint param size mismatch: " + name);
    std::copy(data.begin(), data.end(), v.value_mut().data());
  });
  ck.f_->visit_buffers(prefix + "/fb", [&](const std::string& name, Tensor& t) {
    auto data = store.get_f64(name);
    UCL_CHECK(Index(data.size()) == t.size(), "checkpoint buffer size mismatch: " + name);
    std::copy(data.begin(), data.end(), t.data());
  });
  if (ck.g_) {
    ck.g_->visit(prefix + "/g", [&](const std::string& name, Var& v) {
      auto data = store.get_f64(name);
      UCL_CHECK(Index(data.size()) == v.value().size(), "checkpoint param size mismatch: " + name);
      std::copy(data.begin(), data.end(), v.value_mut().data());
    });
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

void save_model_checkpoint(const std::string& dir, EncoderProjectorModel& model,
                           const CheckpointManifest& manifest) {
  std::filesystem::create_directories(dir);
  BlobStore store;
  model.visit_params([&](const std::string& name, Var& v) {
    store.put_f64("param/" + name, v.value().data(), std::size_t(v.value().size()),
                  std::vector<std::int64_t>(v.value().shape().begin(), v.value().shape().end()));
  });
  model.visit_buffers([&](const std::string& name, Tensor& t) {
    store.put_f64("buffer/" + name, t.data(), std::size_t(t.size()),
                  std::vector<std::int64_t>(t.shape().begin(), t.shape().end()));
  });
  store.save(dir + "/params.bin");

  nlohmann::json j;
  j["task_index"] = manifest.task_index;
  j["config_hash"] = manifest.config_hash;
  j["seed"] = manifest.seed;
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw IngestError("cannot write manifest: " + dir);
  out << j.dump(2) << "\n";
}

CheckpointManifest load_model_checkpoint(const std::string& dir, EncoderProjectorModel& model) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IngestError("cannot read manifest: " + dir);
  nlohmann::json j = nlohmann::json::parse(in);
  CheckpointManifest manifest;
  manifest.task_index = j.at("task_index").get<int>();
  manifest.config_hash = j.value("config_hash", "");
  manifest.seed = j.value("seed", std::uint64_t(0));

  BlobStore store = BlobStore::load(dir + "/params.bin");
  model.visit_params([&](const std::string& name, Var& v) {
    auto data = store.get_f64("param/" + name);
    UCL_CHECK(Index(data.size()) == v.value().size(),
              "checkpoint parameter size mismatch: " + name);
    std::copy(data.begin(), data.end(), v.value_mut().data());
  });
  model.visit_buffers([&](const std::string& name, Tensor& t) {
    auto data = store.get_f64("buffer/" + name);
    UCL_CHECK(Index(data.size()) == t.size(), "checkpoint buffer size mismatch: " + name);
    std::copy(data.begin(), data.end(), t.data());
  });
  return manifest;
}

}  // namespace ucl
