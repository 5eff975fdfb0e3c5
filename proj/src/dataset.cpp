#include "threejoin/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "threejoin/error.hpp"
#include "threejoin/io_util.hpp"
#include "threejoin/rng.hpp"

namespace threejoin {

using nlohmann::json;

std::string_view to_string(Modality modality) {
  switch (modality) {
    case Modality::image: return "image";
    case Modality::sketch: return "sketch";
    case Modality::edge: return "edge";
  }
  return "unknown";
}

Modality parse_ingest_modality(std::string_view token) {
  if (token == "image") return Modality::image;
  if (token == "sketch") return Modality::sketch;
  throw ValidationError("unknown modality token '" + std::string(token) +
                        "' (expected image or sketch)");
}

Raster Sample::load() const {
  if (raster) return *raster;
  return read_png(path);
}

LabelSpace::LabelSpace(std::vector<std::string> class_names,
                       std::vector<bool> seen_mask)
    : class_names_(std::move(class_names)), seen_mask_(std::move(seen_mask)) {
  if (class_names_.size() != seen_mask_.size()) {
    throw ValidationError("label space: names and seen mask differ in length");
  }
  std::set<std::string> unique(class_names_.begin(), class_names_.end());
  if (unique.size() != class_names_.size()) {
    throw ValidationError("label space: duplicate class names");
  }
  seen_rank_.assign(class_names_.size(), -1);
  int rank = 0;
  for (std::size_t i = 0; i < class_names_.size(); ++i) {
    if (seen_mask_[i]) seen_rank_[i] = rank++;
  }
}

const std::string& LabelSpace::name(int label) const {
  if (!is_valid(label)) {
    throw ValidationError("class label " + std::to_string(label) +
                          " outside label space");
  }
  return class_names_[static_cast<std::size_t>(label)];
}

std::vector<int> LabelSpace::seen_classes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < seen_mask_.size(); ++i) {
    if (seen_mask_[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> LabelSpace::unseen_classes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < seen_mask_.size(); ++i) {
    if (!seen_mask_[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::size_t LabelSpace::num_seen() const {
  return static_cast<std::size_t>(
      std::count(seen_mask_.begin(), seen_mask_.end(), true));
}

int LabelSpace::seen_rank(int label) const {
  if (!is_seen(label)) {
    throw ValidationError("class label " + std::to_string(label) +
                          " is not a seen class");
  }
  return seen_rank_[static_cast<std::size_t>(label)];
}

std::optional<int> LabelSpace::find(std::string_view name) const {
  for (std::size_t i = 0; i < class_names_.size(); ++i) {
    if (class_names_[i] == name) return static_cast<int>(i);
  }
  return std::nullopt;
}

void ZeroShotSplit::validate() const {
  const auto check = [&](const std::vector<Sample>& samples, bool want_seen,
                         Modality modality, std::string_view what) {
    for (const auto& s : samples) {
      if (!label_space.is_valid(s.class_label)) {
        throw ValidationError("sample '" + s.id + "' has invalid class label");
      }
      if (label_space.is_seen(s.class_label) != want_seen) {
        throw ValidationError("sample '" + s.id + "' in " + std::string(what) +
                              " has a class from the wrong partition");
      }
      if (s.modality != modality) {
        throw ValidationError("sample '" + s.id + "' in " + std::string(what) +
                              " has modality " + std::string(to_string(s.modality)));
      }
    }
  };
  check(train_images, true, Modality::image, "train images");
  check(train_sketches, true, Modality::sketch, "train sketches");
  check(test_images, false, Modality::image, "test images");
  check(test_sketches, false, Modality::sketch, "test sketches");

  std::set<std::string> train_ids;
  for (const auto* list : {&train_images, &train_sketches}) {
    for (const auto& s : *list) train_ids.insert(s.id);
  }
  for (const auto* list : {&test_images, &test_sketches}) {
    for (const auto& s : *list) {
      if (train_ids.contains(s.id)) {
        throw ValidationError("sample id '" + s.id +
                              "' appears in both train and test");
      }
    }
  }
}

void BatchSpec::validate() const {
  if (batch_size <= 0 || classes_per_batch <= 0) {
    throw ValidationError("batch size and classes per batch must be positive");
  }
  if (batch_size % classes_per_batch != 0) {
    throw ValidationError("batch size " + std::to_string(batch_size) +
                          " not divisible by classes per batch " +
                          std::to_string(classes_per_batch));
  }
}

ZeroShotSplit load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  const auto base = path.parent_path();

  std::string line;
  std::size_t line_no = 0;
  const auto parse_line = [&](const std::string& text) {
    try {
      return json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError("manifest '" + path.string() + "' line " +
                            std::to_string(line_no) + ": " + e.what());
    }
  };

  json header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    header = parse_line(line);
    break;
  }
  if (!header.is_object() || !header.contains("seen") || !header.contains("unseen")) {
    throw ValidationError("manifest '" + path.string() +
                          "' must start with a {\"seen\", \"unseen\"} header");
  }

  std::vector<std::string> names;
  std::vector<bool> mask;
  std::set<std::string> seen_names;
  for (const auto& n : header.at("seen")) {
    names.push_back(n.get<std::string>());
    mask.push_back(true);
    seen_names.insert(names.back());
  }
  for (const auto& n : header.at("unseen")) {
    const auto name = n.get<std::string>();
    if (seen_names.contains(name)) {
      throw ValidationError("class '" + name + "' declared both seen and unseen");
    }
    names.push_back(name);
    mask.push_back(false);
  }

  ZeroShotSplit split;
  split.label_space = LabelSpace(std::move(names), std::move(mask));

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json rec = parse_line(line);
    Sample s;
    try {
      s.id = rec.at("id").get<std::string>();
      s.modality = parse_ingest_modality(rec.at("modality").get<std::string>());
      const auto cls = rec.at("class").get<std::string>();
      const auto label = split.label_space.find(cls);
      if (!label) {
        throw ValidationError("record '" + s.id + "' uses undeclared class '" +
                              cls + "'");
      }
      s.class_label = *label;
      s.path = rec.at("path").get<std::string>();
    } catch (const json::exception& e) {
      throw ValidationError("manifest '" + path.string() + "' line " +
                            std::to_string(line_no) + ": " + e.what());
    }
    if (s.path.is_relative()) s.path = base / s.path;
    if (!std::filesystem::exists(s.path)) {
      throw IoError("manifest '" + path.string() + "' references missing file '" +
                    s.path.string() + "'");
    }
    const bool seen = split.label_space.is_seen(s.class_label);
    if (s.modality == Modality::image) {
      (seen ? split.train_images : split.test_images).push_back(std::move(s));
    } else {
      (seen ? split.train_sketches : split.test_sketches).push_back(std::move(s));
    }
  }
  split.validate();
  return split;
}

void write_manifest(const std::filesystem::path& path, const ZeroShotSplit& split) {
  const auto& ls = split.label_space;
  json header;
  header["seen"] = json::array();
  header["unseen"] = json::array();
  for (int c : ls.seen_classes()) header["seen"].push_back(ls.name(c));
  for (int c : ls.unseen_classes()) header["unseen"].push_back(ls.name(c));

  std::ostringstream out;
  out << header.dump() << '\n';
  const auto base = path.parent_path();
  for (const auto* list : {&split.train_images, &split.train_sketches,
                           &split.test_images, &split.test_sketches}) {
    for (const auto& s : *list) {
      json rec;
      rec["id"] = s.id;
      rec["modality"] = std::string(to_string(s.modality));
      rec["class"] = ls.name(s.class_label);
      rec["path"] = s.path.lexically_relative(base).generic_string();
      out << rec.dump() << '\n';
    }
  }
  write_text_file(path, out.str());
}

std::vector<BatchPair> sample_batch(const ZeroShotSplit& split,
                                    const BatchSpec& spec, std::int64_t step) {
  spec.validate();
  std::map<int, std::vector<std::size_t>> images_by_class;
  std::map<int, std::vector<std::size_t>> sketches_by_class;
  for (std::size_t i = 0; i < split.train_images.size(); ++i) {
    images_by_class[split.train_images[i].class_label].push_back(i);
  }
  for (std::size_t i = 0; i < split.train_sketches.size(); ++i) {
    sketches_by_class[split.train_sketches[i].class_label].push_back(i);
  }
  std::vector<int> eligible;
  for (int c : split.label_space.seen_classes()) {
    if (images_by_class.contains(c) && sketches_by_class.contains(c)) {
      eligible.push_back(c);
    }
  }
  if (eligible.size() < 2) {
    throw SamplingError("need at least 2 seen classes with both images and "
                        "sketches; found " + std::to_string(eligible.size()));
  }
  if (eligible.size() < static_cast<std::size_t>(spec.classes_per_batch)) {
    throw SamplingError("batch wants " + std::to_string(spec.classes_per_batch) +
                        " classes but only " + std::to_string(eligible.size()) +
                        " seen classes have images and sketches");
  }

  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(step)));
  rng.shuffle(std::span(eligible));
  eligible.resize(static_cast<std::size_t>(spec.classes_per_batch));
  std::sort(eligible.begin(), eligible.end());

  const int per_class = spec.batch_size / spec.classes_per_batch;
  // Without replacement while the class pool lasts, then wrap around.
  const auto draw = [&](std::vector<std::size_t> pool) {
    rng.shuffle(std::span(pool));
    std::vector<std::size_t> picked;
    for (int k = 0; k < per_class; ++k) picked.push_back(pool[k % pool.size()]);
    return picked;
  };

  std::vector<BatchPair> batch;
  batch.reserve(static_cast<std::size_t>(spec.batch_size));
  for (int c : eligible) {
    const auto imgs = draw(images_by_class[c]);
    const auto skts = draw(sketches_by_class[c]);
    for (int k = 0; k < per_class; ++k) {
      batch.push_back({split.train_images[imgs[k]], split.train_sketches[skts[k]]});
    }
  }
  return batch;
}

}  // namespace threejoin
