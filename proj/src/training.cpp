#include "threejoin/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "threejoin/error.hpp"
#include "threejoin/io_util.hpp"
#include "threejoin/log.hpp"
#include "threejoin/plot.hpp"

namespace threejoin {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Ablation / config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece = trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start));
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

Ablation Ablation::parse(std::string_view terms) {
  Ablation a{true, false, false, false, false};
  for (const auto& t : split_list(terms)) {
    if (t == "cls") a.cls = true;
    else if (t == "kd") a.kd = true;
    else if (t == "align") a.align = true;
    else if (t == "center") a.center = true;
    else if (t == "triplet") a.triplet = true;
    else if (t == "domain") a.center = a.triplet = true;
    else if (t == "all") a = all();
    else throw UsageError("unknown loss term '" + t + "'");
  }
  return a;
}

std::string Ablation::to_string() const {
  std::vector<std::string> parts;
  if (cls) parts.push_back("cls");
  if (kd) parts.push_back("kd");
  if (align) parts.push_back("align");
  if (center) parts.push_back("center");
  if (triplet) parts.push_back("triplet");
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
}

void TrainConfig::validate() const {
  weights.validate();
  if (!ablation.cls) throw ValidationError("classification loss cannot be disabled");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("Adam betas must lie in [0, 1)");
  }
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (retrieval_dim < 1) throw ValidationError("retrieval_dim must be >= 1");
  if (teacher_epochs < 1) throw ValidationError("teacher_epochs must be >= 1");
  BatchSpec{batch_size, classes_per_batch, seed}.validate();
  if (classes_per_batch < 2) {
    throw ValidationError("classes_per_batch must be >= 2 so every anchor has a negative");
  }
  if (backbone.widths.empty()) throw ValidationError("backbone needs at least one stage");
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      out = static_cast<T>(std::stod(value, &used));
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ValidationError("config key '" + key + "': not a number: '" + value + "'");
    }
  } else {
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc{} || ptr != value.data() + value.size()) {
      throw ValidationError("config key '" + key + "': not an integer: '" + value + "'");
    }
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError("config key '" + key + "': expected true/false");
}

}  // namespace

TrainConfig parse_train_config(std::string_view text, TrainConfig c) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key == "gamma") c.weights.gamma = parse_number<double>(key, value);
    else if (key == "lambda1") c.weights.lambda1 = parse_number<double>(key, value);
    else if (key == "lambda2") c.weights.lambda2 = parse_number<double>(key, value);
    else if (key == "lambda3") c.weights.lambda3 = parse_number<double>(key, value);
    else if (key == "eta") c.weights.eta = parse_number<double>(key, value);
    else if (key == "margin") c.weights.margin = parse_number<double>(key, value);
    else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value);
    else if (key == "adam_beta1") c.adam_beta1 = parse_number<double>(key, value);
    else if (key == "adam_beta2") c.adam_beta2 = parse_number<double>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, value);
    else if (key == "classes_per_batch") c.classes_per_batch = parse_number<int>(key, value);
    else if (key == "epochs") c.epochs = parse_number<int>(key, value);
    else if (key == "retrieval_dim") c.retrieval_dim = parse_number<int>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "ablation") c.ablation = Ablation::parse(value);
    else if (key == "backbone_widths") {
      c.backbone.widths.clear();
      for (const auto& w : split_list(value)) c.backbone.widths.push_back(parse_number<int>(key, w));
    } else if (key == "teacher_epochs") c.teacher_epochs = parse_number<int>(key, value);
    else if (key == "teacher_learning_rate") c.teacher_learning_rate = parse_number<double>(key, value);
    else if (key == "extractor") c.extractor = value;
    else if (key == "init_from_teacher") c.init_from_teacher = parse_bool(key, value);
    else throw ValidationError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  return parse_train_config(read_text_file(path));
}

std::string to_config_text(const TrainConfig& c) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "gamma = " << c.weights.gamma << "\n"
      << "lambda1 = " << c.weights.lambda1 << "\n"
      << "lambda2 = " << c.weights.lambda2 << "\n"
      << "lambda3 = " << c.weights.lambda3 << "\n"
      << "eta = " << c.weights.eta << "\n"
      << "margin = " << c.weights.margin << "\n"
      << "learning_rate = " << c.learning_rate << "\n"
      << "adam_beta1 = " << c.adam_beta1 << "\n"
      << "adam_beta2 = " << c.adam_beta2 << "\n"
      << "batch_size = " << c.batch_size << "\n"
      << "classes_per_batch = " << c.classes_per_batch << "\n"
      << "epochs = " << c.epochs << "\n"
      << "retrieval_dim = " << c.retrieval_dim << "\n"
      << "seed = " << c.seed << "\n"
      << "ablation = " << c.ablation.to_string() << "\n";
  out << "backbone_widths = ";
  for (std::size_t i = 0; i < c.backbone.widths.size(); ++i) {
    out << (i ? "," : "") << c.backbone.widths[i];
  }
  out << "\n"
      << "teacher_epochs = " << c.teacher_epochs << "\n"
      << "teacher_learning_rate = " << c.teacher_learning_rate << "\n"
      << "extractor = " << c.extractor << "\n"
      << "init_from_teacher = " << (c.init_from_teacher ? "true" : "false") << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// State

TrainState init_train_state(const LabelSpace& labels, const TrainConfig& config,
                            std::shared_ptr<const TeacherModel> teacher) {
  config.validate();
  if (!teacher) throw StateError("training requires a teacher model");
  NetworkConfig nc;
  nc.backbone = config.backbone;
  nc.retrieval_dim = config.retrieval_dim;
  nc.num_seen = static_cast<int>(labels.num_seen());
  nc.teacher_classes = teacher->num_classes();
  nc.seed = config.seed;

  TrainState state;
  state.network = ThreeStreamNetwork(nc);
  if (config.init_from_teacher) state.network.init_backbones_from(*teacher);
  state.teacher = std::move(teacher);
  state.teacher_checksum = state.teacher->checksum();
  state.bank = CenterBank(labels.num_seen(), static_cast<std::size_t>(config.retrieval_dim));
  state.optimizer = Adam({config.learning_rate, config.adam_beta1, config.adam_beta2, 1e-8});
  state.label_space = labels;
  return state;
}

RasterStore::RasterStore(const ZeroShotSplit& split, const EdgeCorpus* edges)
    : split_(split), edges_(edges) {}

const Raster& RasterStore::get(const Sample& sample) {
  auto it = cache_.find(sample.id);
  if (it == cache_.end()) it = cache_.emplace(sample.id, sample.load()).first;
  return it->second;
}

const Raster& RasterStore::edge_of(const Sample& image) {
  auto it = edge_cache_.find(image.id);
  if (it != edge_cache_.end()) return it->second;
  if (edges_ == nullptr) throw StateError("no edge corpus attached");
  const auto path = edges_->by_source_id.find(image.id);
  if (path == edges_->by_source_id.end()) {
    throw IoError("missing edge map for image '" + image.id + "'");
  }
  Raster edge = read_png(path->second);
  const Raster& src = get(image);
  if (edge.height != src.height || edge.width != src.width) {
    throw ValidationError("edge map of '" + image.id + "' differs in size from its image");
  }
  return edge_cache_.emplace(image.id, std::move(edge)).first->second;
}

StepBatch RasterStore::assemble(const std::vector<BatchPair>& pairs, bool with_edges) {
  StepBatch b;
  for (const auto& p : pairs) {
    b.images.push_back(get(p.image));
    if (with_edges) b.edges.push_back(edge_of(p.image));
    b.sketches.push_back(get(p.sketch));
    b.image_labels.push_back(split_.label_space.seen_rank(p.image.class_label));
    b.sketch_labels.push_back(split_.label_space.seen_rank(p.sketch.class_label));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Step

namespace {

double norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data) s += v * v;
  return std::sqrt(s);
}

void add_scaled(Matrix& dst, const Matrix& src, double scale) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += scale * src.data[i];
}

double group_norm(const std::vector<Param*>& params) {
  double s = 0.0;
  for (const Param* p : params) {
    for (double g : p->grad) s += g * g;
  }
  return std::sqrt(s);
}

std::vector<Param*> linear_params(Linear& l) {
  if (l.out_features() == 0) return {};
  return {&l.weight, &l.bias};
}

}  // namespace

LossReport train_step(TrainState& state, const StepBatch& batch, const TrainConfig& config) {
  const Ablation& ab = config.ablation;
  const bool edges_needed = ab.needs_edges();
  if (batch.images.empty() || batch.sketches.empty()) throw ShapeError("empty training batch");
  if (edges_needed && batch.edges.size() != batch.images.size()) {
    throw ValidationError("training batch needs exactly one edge map per image");
  }
  auto& net = state.network;
  const int channels = config.backbone.in_channels;

  // (1) forward all streams and the teacher
  const ImageBatch images = make_batch(batch.images, channels);
  const ImageBatch sketches = make_batch(batch.sketches, channels);
  const ImageForward img = net.forward_image(images, ab.kd ? state.teacher.get() : nullptr, true);
  const SketchForward skt = net.forward_sketch(sketches, true);
  EdgeForward edge;
  if (edges_needed) {
    edge = net.forward_edge(make_batch(batch.edges, channels), true);
    // (2) centers from edge features, treated as constants
    state.bank.update(edge.retrieval, batch.image_labels);
  }

  // (3) enabled terms and their feature gradients
  const auto& w = config.weights;
  LossTerms terms;
  Matrix d_img(img.retrieval.rows, img.retrieval.cols);
  Matrix d_skt(skt.retrieval.rows, skt.retrieval.cols);
  Matrix d_edge(edges_needed ? edge.retrieval.rows : 0, edges_needed ? edge.retrieval.cols : 0);
  Matrix d_student;
  std::map<std::string, double> term_norms;

  net.zero_grad();
  auto& enc = net.encoders();
  if (ab.kd) {
    KdLoss kd = kd_loss(img.teacher_logits, img.student_logits, {}, {}, w.gamma);
    auto px = enc.image_backbone.params();
    auto ps = enc.sketch_edge_backbone.params();
    double divergence = 0.0;
    for (std::size_t i = 0; i < px.size(); ++i) {
      divergence += parameter_divergence(px[i]->value, ps[i]->value, w.gamma, px[i]->grad,
                                         ps[i]->grad);
    }
    terms.kd = kd.cross_entropy + divergence;
    d_student = std::move(kd.grad_student);
    term_norms["term/kd"] = norm(d_student);
    term_norms["term/divergence"] = group_norm(px);
  }
  if (ab.align) {
    const PairLoss al = alignment_loss(img.retrieval, edge.retrieval);
    terms.align = al.value;
    add_scaled(d_img, al.grad_a, w.lambda1);
    add_scaled(d_edge, al.grad_b, w.lambda1);
    term_norms["term/align"] = w.lambda1 * std::hypot(norm(al.grad_a), norm(al.grad_b));
  }
  if (ab.center) {
    const FeatureLoss ce = center_loss(skt.retrieval, batch.sketch_labels, state.bank);
    terms.center = ce.value;
    add_scaled(d_skt, ce.grad, w.lambda2);
    term_norms["term/center"] = w.lambda2 * norm(ce.grad);
  }
  if (ab.triplet) {
    const FeatureLoss tr = triplet_loss(skt.retrieval, batch.sketch_labels, state.bank, w.margin);
    terms.triplet = tr.value;
    add_scaled(d_skt, tr.grad, w.lambda2 * w.eta);
    term_norms["term/triplet"] = w.lambda2 * w.eta * norm(tr.grad);
  }
  {
    const ClassificationLoss ci = classification_loss(img.retrieval, batch.image_labels,
                                                      net.classifier());
    const ClassificationLoss cs = classification_loss(skt.retrieval, batch.sketch_labels,
                                                      net.classifier());
    terms.cls = ci.value + cs.value;
    add_scaled(d_img, ci.grad_features, w.lambda3);
    add_scaled(d_skt, cs.grad_features, w.lambda3);
    auto& cw = net.classifier().weight.grad;
    auto& cb = net.classifier().bias.grad;
    for (std::size_t i = 0; i < cw.size(); ++i) {
      cw[i] += w.lambda3 * (ci.grad_weight.data[i] + cs.grad_weight.data[i]);
    }
    for (std::size_t i = 0; i < cb.size(); ++i) {
      cb[i] += w.lambda3 * (ci.grad_bias[i] + cs.grad_bias[i]);
    }
    term_norms["term/cls"] =
        w.lambda3 * std::hypot(norm(ci.grad_features), norm(cs.grad_features));
  }

  LossReport report = total_loss(terms, w);
  report.grad_norms = std::move(term_norms);

  // (4) backward and a single optimizer update; the teacher holds no grads.
  net.backward_image(img, d_img, Matrix{}, d_student);
  net.backward_sketch(skt, d_skt, Matrix{});
  if (ab.align) net.backward_edge(edge, d_edge);

  report.grad_norms["param/image_backbone"] = group_norm(enc.image_backbone.params());
  report.grad_norms["param/sketch_edge_backbone"] = group_norm(enc.sketch_edge_backbone.params());
  report.grad_norms["param/image_head"] = group_norm(linear_params(enc.image_head));
  report.grad_norms["param/edge_head"] = group_norm(linear_params(enc.edge_head));
  report.grad_norms["param/sketch_head"] = group_norm(linear_params(enc.sketch_head));
  report.grad_norms["param/classifier"] = group_norm(linear_params(net.classifier()));
  report.grad_norms["param/kd_head"] = group_norm(linear_params(net.kd_head()));

  for (const Param* p : net.params()) {
    for (double g : p->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in '" + p->name + "'");
    }
  }
  state.optimizer.step(net.params());
  ++state.step;
  return report;
}

std::int64_t steps_per_epoch(const ZeroShotSplit& split, const TrainConfig& config) {
  const auto n = std::min(split.train_images.size(), split.train_sketches.size());
  const auto b = static_cast<std::size_t>(config.batch_size);
  return static_cast<std::int64_t>(std::max<std::size_t>(1, (n + b - 1) / b));
}

// ---------------------------------------------------------------------------
// Persistence

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const TrainConfig& config) {
  Checkpoint ck;
  ck.meta["format"] = "threejoin-train-state";
  ck.meta["retrieval_dim"] = state.network.config().retrieval_dim;
  ck.meta["teacher_checksum"] = state.teacher_checksum;
  ck.meta["teacher_classes"] = state.teacher->num_classes();
  ck.meta["label_space"] = to_json(state.label_space);
  ck.meta["backbone"] = to_json(state.network.config().backbone);
  ck.meta["epoch"] = state.epoch;
  ck.meta["step"] = state.step;
  ck.meta["seed"] = state.network.config().seed;
  ck.meta["config"] = to_config_text(config);
  ck.meta["bank_counts"] = state.bank.counts();
  ck.tensors = state.network.export_tensors();
  for (auto& [name, values] : state.teacher->export_tensors()) ck.tensors[name] = values;
  ck.tensors["center_bank/centers"] = state.bank.centers().data;
  state.optimizer.export_state(ck.tensors, ck.meta);
  save_checkpoint(path, ck);
}

TrainState load_train_state(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  try {
    TrainState state;
    state.label_space = label_space_from_json(ck.meta.at("label_space"));
    const TrainConfig config = parse_train_config(ck.meta.at("config").get<std::string>());
    const BackboneConfig backbone = backbone_config_from_json(ck.meta.at("backbone"));
    const int teacher_classes = ck.meta.at("teacher_classes").get<int>();

    state.teacher = std::make_shared<const TeacherModel>(
        TeacherModel::import_tensors(backbone, teacher_classes, ck.tensors));
    state.teacher_checksum = ck.meta.at("teacher_checksum").get<std::uint64_t>();
    if (state.teacher->checksum() != state.teacher_checksum) {
      throw ValidationError("teacher parameters in '" + path.string() +
                            "' do not match the stored checksum");
    }
    NetworkConfig nc;
    nc.backbone = backbone;
    nc.retrieval_dim = ck.meta.at("retrieval_dim").get<int>();
    nc.num_seen = static_cast<int>(state.label_space.num_seen());
    nc.teacher_classes = teacher_classes;
    nc.seed = ck.meta.at("seed").get<std::uint64_t>();
    state.network = ThreeStreamNetwork(nc);
    state.network.import_tensors(ck.tensors);

    const auto& centers = ck.tensors.at("center_bank/centers");
    Matrix cm(state.label_space.num_seen(), static_cast<std::size_t>(nc.retrieval_dim));
    if (centers.size() != cm.data.size()) throw ShapeError("center bank size mismatch");
    cm.data = centers;
    state.bank = CenterBank(cm.rows, cm.cols);
    state.bank.restore(std::move(cm), ck.meta.at("bank_counts").get<std::vector<std::uint64_t>>());

    state.optimizer = Adam({config.learning_rate, config.adam_beta1, config.adam_beta2, 1e-8});
    state.optimizer.import_state(ck.tensors, ck.meta);
    state.epoch = ck.meta.at("epoch").get<int>();
    state.step = ck.meta.at("step").get<std::int64_t>();
    return state;
  } catch (const json::exception& e) {
    throw IoError("checkpoint '" + path.string() + "' has malformed metadata: " + e.what());
  } catch (const std::out_of_range&) {
    throw IoError("checkpoint '" + path.string() + "' lacks required tensors");
  }
}

json metrics_line(std::int64_t step, const LossReport& r) {
  const auto opt = [](const std::optional<double>& v) -> json {
    return v ? json(*v) : json(nullptr);
  };
  json j;
  j["step"] = step;
  j["kd"] = opt(r.kd);
  j["align"] = opt(r.align);
  j["center"] = opt(r.center);
  j["triplet"] = opt(r.triplet);
  j["cls"] = opt(r.cls);
  j["total"] = r.total;
  return j;
}

// ---------------------------------------------------------------------------
// Loop

std::shared_ptr<const TeacherModel> train_teacher(const ZeroShotSplit& split,
                                                  const TrainConfig& config) {
  TeacherTrainConfig tc;
  tc.epochs = config.teacher_epochs;
  tc.batch_size = config.batch_size;
  tc.learning_rate = config.teacher_learning_rate;
  tc.seed = config.seed;
  tc.backbone = config.backbone;
  return std::make_shared<const TeacherModel>(
      make_teacher(split.train_images, split.label_space, tc));
}

namespace {

// Keeps metrics lines with step < `keep_below`; used when resuming.
void truncate_metrics(const std::filesystem::path& path, std::int64_t keep_below) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::ostringstream kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.value("step", std::int64_t{-1}) < keep_below) kept << line << '\n';
  }
  in.close();
  write_text_file(path, kept.str());
}

}  // namespace

TrainResult train(const ZeroShotSplit& split, const EdgeCorpus& edges, const TrainConfig& config,
                  const std::filesystem::path& out_dir, const TrainOptions& options) {
  config.validate();
  split.validate();
  for (const auto& img : split.train_images) {
    if (config.ablation.needs_edges() && !edges.by_source_id.contains(img.id)) {
      throw IoError("edge map missing for train image '" + img.id + "'; run extract-edges first");
    }
  }
  std::filesystem::create_directories(out_dir);

  TrainState state;
  if (options.resume_from) {
    state = load_train_state(*options.resume_from);
    if (!(state.label_space == split.label_space)) {
      throw ValidationError("resume checkpoint was trained on a different label space");
    }
    log::info("resuming at epoch " + std::to_string(state.epoch) + ", step " +
              std::to_string(state.step));
  } else {
    auto teacher = options.teacher ? options.teacher : train_teacher(split, config);
    state = init_train_state(split.label_space, config, std::move(teacher));
  }

  TrainResult result;
  result.metrics_log = out_dir / "metrics.jsonl";
  result.checkpoint = out_dir / "checkpoint.ckpt";
  result.teacher_checksum_before = state.teacher->checksum();
  if (result.teacher_checksum_before != state.teacher_checksum) {
    throw StateError("teacher checksum changed before training started");
  }
  if (options.resume_from) {
    truncate_metrics(result.metrics_log, state.step);
  } else {
    write_text_file(result.metrics_log, "");
  }
  std::ofstream metrics(result.metrics_log, std::ios::app);
  if (!metrics) throw IoError("cannot open metrics log '" + result.metrics_log.string() + "'");

  RasterStore store(split, &edges);
  const BatchSpec spec{config.batch_size, config.classes_per_batch, config.seed};
  const std::int64_t per_epoch = steps_per_epoch(split, config);
  const int last_epoch = options.stop_after_epoch ? std::min(*options.stop_after_epoch, config.epochs)
                                                  : config.epochs;

  while (state.epoch < last_epoch) {
    state.bank.reset();
    double epoch_total = 0.0;
    for (std::int64_t k = 0; k < per_epoch; ++k) {
      const auto pairs = sample_batch(split, spec, state.step);
      const StepBatch batch = store.assemble(pairs, config.ablation.needs_edges());
      const std::int64_t step = state.step;
      LossReport report = train_step(state, batch, config);
      metrics << metrics_line(step, report).dump() << '\n';
      epoch_total += report.total;
      result.reports.push_back(std::move(report));
    }
    metrics.flush();
    ++state.epoch;
    save_train_state(out_dir / "checkpoints" / ("epoch_" + std::to_string(state.epoch) + ".ckpt"),
                     state, config);
    save_train_state(result.checkpoint, state, config);
    log::info("epoch " + std::to_string(state.epoch) + "/" + std::to_string(config.epochs) +
              " mean total loss " + std::to_string(epoch_total / static_cast<double>(per_epoch)));
  }

  result.teacher_checksum_after = state.teacher->checksum();
  if (result.teacher_checksum_after != result.teacher_checksum_before) {
    throw StateError("teacher parameters changed during training");
  }
  if (options.write_plots && !result.reports.empty()) {
    PlotSeries total;
    for (const auto& r : result.reports) total.y.push_back(r.total);
    write_line_plot(out_dir / "loss_curve.png", {total});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Encoding

EmbeddingSet encode_samples(const ThreeStreamNetwork& network, const std::vector<Sample>& samples,
                            Modality modality, EmbeddingRole role) {
  EmbeddingSet set;
  set.role = role;
  set.vectors = Matrix(samples.size(), static_cast<std::size_t>(network.config().retrieval_dim));
  constexpr std::size_t kChunk = 32;
  const int channels = network.config().backbone.in_channels;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t end = std::min(samples.size(), start + kChunk);
    std::vector<Raster> rasters;
    for (std::size_t i = start; i < end; ++i) rasters.push_back(samples[i].load());
    const ImageBatch batch = make_batch(rasters, channels);
    Matrix retrieval;
    switch (modality) {
      case Modality::image: retrieval = network.forward_image(batch, nullptr, false).retrieval; break;
      case Modality::sketch: retrieval = network.forward_sketch(batch, false).retrieval; break;
      case Modality::edge: retrieval = network.forward_edge(batch, false).retrieval; break;
    }
    for (std::size_t i = start; i < end; ++i) {
      std::copy(retrieval.row(i - start).begin(), retrieval.row(i - start).end(),
                set.vectors.row(i).begin());
    }
  }
  for (const auto& s : samples) {
    set.ids.push_back(s.id);
    set.labels.push_back(static_cast<std::uint32_t>(s.class_label));
  }
  return set;
}

Matrix EncodedSplit::itq_training_features() const {
  Matrix m(train_images.size() + train_sketches.size(), train_images.dim());
  std::size_t r = 0;
  for (const auto* set : {&train_images, &train_sketches}) {
    for (std::size_t i = 0; i < set->size(); ++i, ++r) {
      std::copy(set->vectors.row(i).begin(), set->vectors.row(i).end(), m.row(r).begin());
    }
  }
  return m;
}

EncodedSplit encode_split(const ThreeStreamNetwork& network, const ZeroShotSplit& split) {
  EncodedSplit e;
  e.train_images = encode_samples(network, split.train_images, Modality::image, EmbeddingRole::gallery);
  e.train_sketches = encode_samples(network, split.train_sketches, Modality::sketch, EmbeddingRole::query);
  e.test_images = encode_samples(network, split.test_images, Modality::image, EmbeddingRole::gallery);
  e.test_sketches = encode_samples(network, split.test_sketches, Modality::sketch, EmbeddingRole::query);
  return e;
}

// ---------------------------------------------------------------------------
// Ablation

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants{
      {1, "baseline(L_cls)", Ablation::parse("cls")},
      {2, "L_cls+L_kd", Ablation::parse("cls,kd")},
      {3, "L_cls+L_kd+L_align", Ablation::parse("cls,kd,align")},
      {4, "L_cls+L_kd+L_domain", Ablation::parse("cls,kd,center,triplet")},
      {5, "L_cls+L_kd+L_align+L_center", Ablation::parse("cls,kd,align,center")},
      {6, "L_cls+L_kd+L_align+L_triplet", Ablation::parse("cls,kd,align,triplet")},
      {7, "3JOIN", Ablation::all()},
  };
  return variants;
}

std::vector<AblationRow> ablate(const ZeroShotSplit& split, const EdgeCorpus& edges,
                                const TrainConfig& base, const std::filesystem::path& out_dir,
                                std::shared_ptr<const TeacherModel> teacher) {
  base.validate();
  if (!teacher) teacher = train_teacher(split, base);
  std::vector<AblationRow> rows;
  for (const auto& variant : ablation_variants()) {
    log::info("ablation variant " + std::to_string(variant.index) + ": " + variant.name);
    TrainConfig cfg = base;
    cfg.ablation = variant.terms;
    TrainOptions opts;
    opts.teacher = teacher;
    const auto dir = out_dir / ("variant_" + std::to_string(variant.index));
    const TrainResult tr = train(split, edges, cfg, dir, opts);
    const TrainState state = load_train_state(tr.checkpoint);
    const EncodedSplit enc = encode_split(state.network, split);
    AblationRow row{variant, evaluate(enc.test_sketches, enc.test_images, EvalMode::cosine),
                    tr.reports.empty() ? 0.0 : tr.reports.back().total};
    rows.push_back(std::move(row));
  }

  std::ostringstream csv, txt;
  json table = json::array();
  csv << "variant,name,terms,mAP_all,prec_100\n";
  txt << std::left << std::setw(4) << "#" << std::setw(34) << "variant" << std::setw(10)
      << "mAP@all" << "Prec@100\n";
  txt << std::fixed << std::setprecision(4);
  csv << std::setprecision(10);
  for (const auto& r : rows) {
    csv << r.variant.index << ',' << r.variant.name << ",\"" << r.variant.terms.to_string()
        << "\"," << r.cosine.map_all << ',' << r.cosine.prec_100 << '\n';
    txt << std::setw(4) << r.variant.index << std::setw(34) << r.variant.name << std::setw(10)
        << r.cosine.map_all << r.cosine.prec_100 << '\n';
    table.push_back({{"variant", r.variant.index},
                     {"name", r.variant.name},
                     {"terms", r.variant.terms.to_string()},
                     {"mAP_all", r.cosine.map_all},
                     {"prec_100", r.cosine.prec_100}});
  }
  write_text_file(out_dir / "ablation.csv", csv.str());
  write_text_file(out_dir / "ablation.txt", txt.str());
  write_text_file(out_dir / "ablation.json", table.dump(2) + "\n");
  return rows;
}

}  // namespace threejoin
