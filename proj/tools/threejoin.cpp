#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "threejoin/dataset.hpp"
#include "threejoin/edgemap.hpp"
#include "threejoin/error.hpp"
#include "threejoin/io_util.hpp"
#include "threejoin/log.hpp"
#include "threejoin/plot.hpp"
#include "threejoin/retrieval.hpp"
#include "threejoin/training.hpp"

namespace fs = std::filesystem;
using namespace threejoin;

namespace {

struct GenDataArgs {
  fs::path out;
  SyntheticCorpusConfig corpus;
};

struct ExtractArgs {
  fs::path manifest;
  std::string extractor = "canny";
  ExtractorConfig canny;
};

struct TrainArgs {
  fs::path manifest, out, config;
  std::string ablation;
  fs::path resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  bool no_plots = false;
};

struct EncodeArgs {
  fs::path checkpoint, manifest, out;
  std::string split = "test";
};

struct RetrieveArgs {
  fs::path queries, gallery;
  std::string query_id;
  std::size_t top_k = 8;
};

struct EvaluateArgs {
  fs::path queries, gallery, checkpoint, manifest, out, plot;
  std::vector<fs::path> itq_train;
  std::string mode = "cosine";
  std::uint64_t seed = 0;
};

struct AblateArgs {
  fs::path manifest, out, config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

TrainConfig resolve_config(const fs::path& file, std::optional<std::uint64_t> seed,
                           std::optional<int> epochs) {
  TrainConfig cfg = file.empty() ? TrainConfig{} : load_train_config(file);
  if (seed) cfg.seed = *seed;
  if (epochs) cfg.epochs = *epochs;
  return cfg;
}

EdgeCorpus edges_for(const ZeroShotSplit& split, const fs::path& manifest, const TrainConfig& cfg,
                     bool required) {
  if (!required) return EdgeCorpus{cfg.extractor, {}, 0, 0};
  return locate_corpus(split, cfg.extractor, manifest.parent_path());
}

int run_gen_data(const GenDataArgs& a) {
  const ZeroShotSplit split = generate_synthetic_corpus(a.corpus, a.out);
  std::cout << "wrote " << (a.out / "manifest.jsonl").string() << ": "
            << split.train_images.size() << " train images, " << split.train_sketches.size()
            << " train sketches, " << split.test_images.size() << " test images, "
            << split.test_sketches.size() << " test sketches\n";
  return 0;
}

int run_extract(const ExtractArgs& a) {
  if (a.extractor != "canny") throw UsageError("unknown extractor '" + a.extractor + "'");
  const ZeroShotSplit split = load_manifest(a.manifest);
  const CannyExtractor extractor(a.canny);
  const EdgeCorpus corpus = extract_corpus(split, extractor, a.manifest.parent_path());
  std::cout << corpus.extracted << " extracted, " << corpus.reused << " reused\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_config(a.config, a.seed, a.epochs);
  if (!a.ablation.empty()) cfg.ablation = Ablation::parse(a.ablation);
  cfg.validate();
  const ZeroShotSplit split = load_manifest(a.manifest);
  const EdgeCorpus edges = edges_for(split, a.manifest, cfg, cfg.ablation.needs_edges());
  TrainOptions opts;
  if (!a.resume.empty()) opts.resume_from = a.resume;
  opts.write_plots = !a.no_plots;
  const TrainResult r = train(split, edges, cfg, a.out, opts);
  if (!r.reports.empty()) {
    std::cout << "initial total " << r.reports.front().total << ", final total "
              << r.reports.back().total << "\n";
  }
  std::cout << "checkpoint " << r.checkpoint.string() << "\n";
  return 0;
}

int run_encode(const EncodeArgs& a) {
  const TrainState state = load_train_state(a.checkpoint);
  const ZeroShotSplit split = load_manifest(a.manifest);
  if (!(split.label_space == state.label_space)) {
    throw ValidationError("manifest classes differ from the checkpoint's label space");
  }
  fs::create_directories(a.out);
  const auto dump = [&](const std::vector<Sample>& samples, Modality m, EmbeddingRole role,
                        const std::string& name) {
    const EmbeddingSet set = encode_samples(state.network, samples, m, role);
    const fs::path path = a.out / (name + ".3jem");
    save_embeddings(path, set);
    std::cout << path.string() << " (" << set.size() << " x " << set.dim() << ")\n";
  };
  const bool train = a.split == "train" || a.split == "all";
  const bool test = a.split == "test" || a.split == "all";
  if (train) {
    dump(split.train_images, Modality::image, EmbeddingRole::gallery, "train_images");
    dump(split.train_sketches, Modality::sketch, EmbeddingRole::query, "train_sketches");
  }
  if (test) {
    dump(split.test_images, Modality::image, EmbeddingRole::gallery, "test_images");
    dump(split.test_sketches, Modality::sketch, EmbeddingRole::query, "test_sketches");
  }
  return 0;
}

int run_retrieve(const RetrieveArgs& a) {
  if (a.top_k == 0) throw UsageError("--top-k must be positive");
  const EmbeddingSet queries = load_embeddings(a.queries, EmbeddingRole::query);
  const EmbeddingSet gallery = load_embeddings(a.gallery, EmbeddingRole::gallery);
  const auto it = std::find(queries.ids.begin(), queries.ids.end(), a.query_id);
  if (it == queries.ids.end()) {
    throw ValidationError("query id '" + a.query_id + "' not found in " + a.queries.string());
  }
  const auto q = static_cast<std::size_t>(it - queries.ids.begin());
  const auto ranking = rank_cosine(queries.vectors.row(q), gallery);
  const std::size_t n = std::min(a.top_k, ranking.size());
  for (std::size_t i = 0; i < n; ++i) std::cout << gallery.ids[ranking[i]] << "\n";
  return 0;
}

EmbeddingSet concat(const std::vector<fs::path>& paths) {
  EmbeddingSet all;
  for (const auto& p : paths) {
    const EmbeddingSet s = load_embeddings(p);
    if (all.size() > 0 && s.dim() != all.dim()) throw ShapeError("ITQ training dims differ");
    Matrix m(all.size() + s.size(), s.dim());
    std::copy(all.vectors.data.begin(), all.vectors.data.end(), m.data.begin());
    std::copy(s.vectors.data.begin(), s.vectors.data.end(),
              m.data.begin() + static_cast<std::ptrdiff_t>(all.vectors.data.size()));
    all.vectors = std::move(m);
    all.ids.insert(all.ids.end(), s.ids.begin(), s.ids.end());
    all.labels.insert(all.labels.end(), s.labels.begin(), s.labels.end());
  }
  return all;
}

int run_evaluate(const EvaluateArgs& a) {
  const EvalMode mode = parse_eval_mode(a.mode);
  EmbeddingSet queries, gallery;
  Matrix itq_train;
  if (!a.checkpoint.empty()) {
    if (a.manifest.empty()) throw UsageError("--checkpoint requires --manifest");
    const TrainState state = load_train_state(a.checkpoint);
    const ZeroShotSplit split = load_manifest(a.manifest);
    const EncodedSplit enc = encode_split(state.network, split);
    queries = enc.test_sketches;
    gallery = enc.test_images;
    itq_train = enc.itq_training_features();
  } else {
    if (a.queries.empty() || a.gallery.empty()) {
      throw UsageError("give --checkpoint and --manifest, or --queries and --gallery");
    }
    queries = load_embeddings(a.queries, EmbeddingRole::query);
    gallery = load_embeddings(a.gallery, EmbeddingRole::gallery);
    if (mode == EvalMode::hamming64) {
      if (a.itq_train.empty()) throw UsageError("hamming64 needs --itq-train embedding files");
      itq_train = concat(a.itq_train).vectors;
    }
  }
  const EvalReport report =
      evaluate(queries, gallery, mode, itq_train.empty() ? nullptr : &itq_train, a.seed);
  const std::string text = report.to_json().dump(2) + "\n";
  if (!a.out.empty()) write_text_file(a.out, text);
  std::cout << text;
  if (!a.plot.empty()) write_line_plot(a.plot, {PlotSeries{report.precision_curve}});
  return 0;
}

int run_ablate(const AblateArgs& a) {
  const TrainConfig cfg = resolve_config(a.config, a.seed, a.epochs);
  const ZeroShotSplit split = load_manifest(a.manifest);
  const EdgeCorpus edges = edges_for(split, a.manifest, cfg, true);
  ablate(split, edges, cfg, a.out);
  std::cout << read_text_file(a.out / "ablation.txt");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot sketch-based image retrieval with a three-stream network"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic seen/unseen corpus");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--classes", gen.corpus.num_classes, "Number of classes")->capture_default_str();
  gen_cmd->add_option("--images-per-class", gen.corpus.images_per_class)->capture_default_str();
  gen_cmd->add_option("--sketches-per-class", gen.corpus.sketches_per_class)->capture_default_str();
  gen_cmd->add_option("--size", gen.corpus.image_size, "Raster side in pixels")->capture_default_str();
  gen_cmd->add_option("--unseen-fraction", gen.corpus.unseen_fraction)->capture_default_str();
  gen_cmd->add_option("--seed", gen.corpus.seed)->capture_default_str();

  ExtractArgs ext;
  auto* ext_cmd = app.add_subcommand("extract-edges", "Write one edge map per training image");
  ext_cmd->add_option("--manifest", ext.manifest)->required()->check(CLI::ExistingFile);
  ext_cmd->add_option("--extractor", ext.extractor)->capture_default_str();
  ext_cmd->add_option("--sigma", ext.canny.gaussian_sigma)->capture_default_str();
  ext_cmd->add_option("--low", ext.canny.low_threshold)->capture_default_str();
  ext_cmd->add_option("--high", ext.canny.high_threshold)->capture_default_str();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Train the three-stream network");
  tr_cmd->add_option("--manifest", tr.manifest)->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--out", tr.out, "Run directory")->required();
  tr_cmd->add_option("--config", tr.config, "key = value config file")->check(CLI::ExistingFile);
  tr_cmd->add_option("--ablation", tr.ablation, "Loss terms, e.g. cls,kd,align or all");
  tr_cmd->add_option("--resume", tr.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  tr_cmd->add_option("--seed", tr.seed);
  tr_cmd->add_option("--epochs", tr.epochs);
  tr_cmd->add_flag("--no-plots", tr.no_plots);

  EncodeArgs enc;
  auto* enc_cmd = app.add_subcommand("encode", "Dump retrieval embeddings per modality");
  enc_cmd->add_option("--checkpoint", enc.checkpoint)->required()->check(CLI::ExistingFile);
  enc_cmd->add_option("--manifest", enc.manifest)->required()->check(CLI::ExistingFile);
  enc_cmd->add_option("--split", enc.split)
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  enc_cmd->add_option("--out", enc.out, "Output directory")->required();

  RetrieveArgs ret;
  auto* ret_cmd = app.add_subcommand("retrieve", "Print the top-k gallery ids for one query");
  ret_cmd->add_option("--queries", ret.queries)->required()->check(CLI::ExistingFile);
  ret_cmd->add_option("--gallery", ret.gallery)->required()->check(CLI::ExistingFile);
  ret_cmd->add_option("--query-id", ret.query_id)->required();
  ret_cmd->add_option("--top-k", ret.top_k)->capture_default_str();

  EvaluateArgs ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "mAP@all and Prec@100 of sketch queries");
  ev_cmd->add_option("--mode", ev.mode)
      ->check(CLI::IsMember({"cosine", "hamming64"}))
      ->capture_default_str();
  ev_cmd->add_option("--checkpoint", ev.checkpoint)->check(CLI::ExistingFile);
  ev_cmd->add_option("--manifest", ev.manifest)->check(CLI::ExistingFile);
  ev_cmd->add_option("--queries", ev.queries)->check(CLI::ExistingFile);
  ev_cmd->add_option("--gallery", ev.gallery)->check(CLI::ExistingFile);
  ev_cmd->add_option("--itq-train", ev.itq_train, "Embedding files used to fit ITQ")
      ->check(CLI::ExistingFile);
  ev_cmd->add_option("--out", ev.out, "JSON report path");
  ev_cmd->add_option("--plot", ev.plot, "Precision@k curve PNG");
  ev_cmd->add_option("--seed", ev.seed)->capture_default_str();

  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "Train and evaluate the seven loss variants");
  ab_cmd->add_option("--manifest", ab.manifest)->required()->check(CLI::ExistingFile);
  ab_cmd->add_option("--out", ab.out)->required();
  ab_cmd->add_option("--config", ab.config)->check(CLI::ExistingFile);
  ab_cmd->add_option("--seed", ab.seed);
  ab_cmd->add_option("--epochs", ab.epochs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    std::cerr << failing->help();
    return 1;
  }

  const std::string_view lvl = log_level;
  log::set_level(lvl == "debug" ? log::Level::debug
                 : lvl == "warn" ? log::Level::warn
                 : lvl == "error" ? log::Level::error
                 : lvl == "off" ? log::Level::off
                                : log::Level::info);
  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*ext_cmd) return run_extract(ext);
    if (*tr_cmd) return run_train(tr);
    if (*enc_cmd) return run_encode(enc);
    if (*ret_cmd) return run_retrieve(ret);
    if (*ev_cmd) return run_evaluate(ev);
    if (*ab_cmd) return run_ablate(ab);
  } catch (const threejoin::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
