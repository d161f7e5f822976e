// cafdet: data generation, training, evaluation, gradient checks, benchmarks and
// single forward passes for the toy CAF detector.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation failure, 3 numerical failure.

#include "caf/bench.hpp"
#include "caf/dataset.hpp"
#include "caf/detector.hpp"
#include "caf/gradcheck_suite.hpp"
#include "caf/io.hpp"
#include "caf/metrics.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace caf;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config validation failures come from bad flags, so they are usage errors.
template <class F>
void as_usage(F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

struct SceneFlags {
  Index image_size = 64;
  Index min_objects = 1;
  Index max_objects = 4;
  double noise = 0.05;
  Index blur = 1;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--image-size", image_size, "Square image side in px (multiple of 8)")->capture_default_str();
    app->add_option("--min-objects", min_objects, "Minimum discs per image")->capture_default_str();
    app->add_option("--max-objects", max_objects, "Maximum discs per image")->capture_default_str();
    app->add_option("--noise", noise, "Std-dev of background noise")->capture_default_str();
    app->add_option("--blur", blur, "Box-blur radius in px")->capture_default_str();
    app->add_option("--scene-seed", seed, "Seed of the scene generator")->capture_default_str();
  }

  SceneConfig config() const {
    SceneConfig s;
    s.height = s.width = image_size;
    s.min_objects = min_objects;
    s.max_objects = max_objects;
    s.noise = noise;
    s.blur = blur;
    s.seed = seed;
    as_usage([&] { s.validate(); });
    if (image_size % kCellSize != 0) throw UsageError("--image-size must be a multiple of 8");
    return s;
  }
};

std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void print_report(const EvalReport& r, const std::string& report_out) {
  const std::string text = format_report(r);
  if (!report_out.empty()) write_text_atomic(report_out, text);
  std::cout << text;
}

// gen-data

struct GenData {
  std::string out;
  Index count = 100;
  SceneFlags scene;

  void add(CLI::App* app) {
    app->add_option("--out", out, "Dataset directory to create")->required();
    app->add_option("--count", count, "Number of images")->capture_default_str()->check(CLI::NonNegativeNumber);
    scene.add(app);
    app->add_option("--seed", scene.seed, "Alias of --scene-seed");
  }

  int run() const {
    const SceneConfig cfg = scene.config();
    write_dataset(out, cfg, count);
    const Dataset ds = read_dataset(out);
    std::size_t boxes = 0;
    std::vector<std::size_t> per_class(static_cast<std::size_t>(cfg.class_count()), 0);
    for (const Scene& s : ds.scenes) {
      boxes += s.gts.size();
      for (const DetBox& b : s.gts) ++per_class[static_cast<std::size_t>(b.class_id)];
    }
    std::cout << "images=" << ds.scenes.size() << "\nobjects=" << boxes << '\n';
    for (std::size_t k = 0; k < per_class.size(); ++k) std::cout << "objects.class" << k << '=' << per_class[k] << '\n';
    return kOk;
  }
};

// train

struct Train {
  std::string out;
  std::string loss_csv;
  std::string resume;
  TrainConfig train;
  DetectorConfig model;
  SceneFlags scene;
  bool no_caf = false;
  bool quiet = false;

  void add(CLI::App* app) {
    app->add_option("--out", out, "Checkpoint to write")->required();
    app->add_option("--loss-csv", loss_csv, "Loss history CSV (default: <out>.loss.csv)");
    app->add_option("--resume", resume, "Continue from this checkpoint (architecture and seeds come from it)");
    app->add_option("--steps", train.steps, "SGD steps")->capture_default_str()->check(CLI::NonNegativeNumber);
    app->add_option("--lr", train.lr, "Learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
    app->add_option("--batch", train.batch, "Images per step")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--seed", train.seed, "Parameter initialization seed")->capture_default_str();
    app->add_option("--patience", train.patience, "Validation checks without improvement before stopping (0 = off)")
        ->capture_default_str();
    app->add_option("--eval-every", train.eval_every, "Steps between validation checks")->capture_default_str();
    app->add_option("--val-size", train.val_size, "Validation scenes")->capture_default_str();
    app->add_option("--train-set-size", train.train_set_size, "Cycle a fixed set of scenes (0 = fresh stream)")
        ->capture_default_str();
    app->add_option("--clip-norm", train.clip_norm, "Cap on the global gradient norm (0 = off)")->capture_default_str();
    app->add_option("--warmup", train.warmup_steps, "Linear learning-rate warmup steps")->capture_default_str();
    app->add_option("--caf-blocks", model.caf_blocks, "CAFBlocks after the backbone")->capture_default_str();
    app->add_flag("--no-caf-block", no_caf, "Baseline arm: no CAFBlock");
    app->add_option("--hidden", model.block.hidden, "MSNN hidden width (0 = 2 x width)")->capture_default_str();
    app->add_option("--groups", model.block.shuffle_groups, "Channel-shuffle groups (0 = default)")->capture_default_str();
    app->add_option("--n1", model.block.dilation_n1, "First MSNN dilation")->capture_default_str();
    app->add_option("--n2", model.block.dilation_n2, "Second MSNN dilation")->capture_default_str();
    scene.add(app);
    app->add_flag("--quiet", quiet, "No per-step progress on stderr");
  }

  int run() {
    SceneConfig scene_cfg = scene.config();
    if (no_caf) model.caf_blocks = 0;
    ToyDetectorParams<float> params;
    DetectorCheckpointInfo info;
    if (!resume.empty()) {
      params = detector_from_checkpoint(read_checkpoint(resume), &info);
      scene_cfg.seed = info.scene_seed;
      train.seed = info.init_seed;
      train.start_step = info.step;
    } else {
      as_usage([&] {
        model.validate();
        train.validate();
      });
      params = init_detector<float>(model, train.seed);
      info.config = model;
      info.init_seed = train.seed;
      info.scene_seed = scene_cfg.seed;
    }
    as_usage([&] { train.validate(); });
    if (params.classes() != scene_cfg.class_count()) throw UsageError("checkpoint class count differs from the scene");
    const std::string csv_path = loss_csv.empty() ? out + ".loss.csv" : loss_csv;

    const TrainResult r = caf::train(train, scene_cfg, params, [&](Index step, double loss) {
      if (!quiet && (step + 1) % 100 == 0) std::cerr << "step " << step + 1 << " loss " << loss << '\n';
    });
    info.step = train.start_step + r.steps_run;
    write_checkpoint(out, detector_checkpoint(r.params, info));

    std::map<Index, double> val;
    for (const auto& [s, v] : r.val_history) val[s] = v;
    std::string csv = "step,loss,val_loss\n";
    for (std::size_t i = 0; i < r.loss_history.size(); ++i) {
      const Index step = train.start_step + static_cast<Index>(i) + 1;
      csv += std::to_string(step) + ',' + csv_number(r.loss_history[i]) + ',';
      if (auto it = val.find(step); it != val.end()) csv += csv_number(it->second);
      csv += '\n';
    }
    write_text_atomic(csv_path, csv);

    std::cout << "steps_run=" << r.steps_run << "\nbest_step=" << r.best_step
              << "\nearly_stopped=" << (r.early_stopped ? 1 : 0) << '\n';
    if (!r.loss_history.empty()) {
      std::cout << "initial_loss=" << csv_number(r.loss_history.front())
                << "\nfinal_loss=" << csv_number(r.loss_history.back()) << '\n';
    }
    if (train.val_size > 0) {
      const EvalReport rep = evaluate_detector(r.params, validation_set(scene_cfg, train.val_size));
      std::cout << "val_map50=" << csv_number(rep.map50) << "\nval_map50_95=" << csv_number(rep.map50_95) << '\n';
    }
    std::cout << "checkpoint=" << out << "\nloss_csv=" << csv_path << '\n';
    return kOk;
  }
};

// eval

struct Eval {
  std::string dets;
  std::string gts;
  std::string checkpoint;
  std::string data;
  std::string dets_out;
  std::string report_out;
  std::vector<int> classes;
  double conf = 0.001;
  double iou = 0.5;

  void add(CLI::App* app) {
    auto* d = app->add_option("--dets", dets, "Detections file (image_id,class_id,score,x1,y1,x2,y2)");
    auto* g = app->add_option("--gts", gts, "Ground-truth file (image_id,class_id,x1,y1,x2,y2)");
    auto* c = app->add_option("--checkpoint", checkpoint, "Detector checkpoint to run");
    auto* ds = app->add_option("--data", data, "Dataset directory for --checkpoint");
    d->needs(g);
    g->needs(d);
    c->needs(ds);
    ds->needs(c);
    d->excludes(c);
    app->add_option("--classes", classes, "Class ids to evaluate (default: all present)")->delimiter(',');
    app->add_option("--conf", conf, "Score threshold when decoding")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    app->add_option("--iou", iou, "NMS IoU threshold when decoding")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    app->add_option("--dets-out", dets_out, "Also write decoded detections here");
    app->add_option("--report-out", report_out, "Also write the report here");
  }

  int run() const {
    if (dets.empty() && checkpoint.empty()) throw UsageError("eval needs --dets/--gts or --checkpoint/--data");
    std::vector<std::vector<DetBox>> det_boxes;
    std::vector<std::vector<DetBox>> gt_boxes;
    std::set<int> present;
    if (!dets.empty()) {
      const std::vector<DetectionRecord> gt_rec = read_detections(gts, false);
      const std::vector<DetectionRecord> det_rec = read_detections(dets, true);
      std::vector<std::string> ids;
      for (const auto* recs : {&gt_rec, &det_rec}) {
        for (const DetectionRecord& r : *recs) {
          if (std::find(ids.begin(), ids.end(), r.image_id) == ids.end()) ids.push_back(r.image_id);
          present.insert(r.box.class_id);
        }
      }
      gt_boxes = group_by_image(gt_rec, ids);
      det_boxes = group_by_image(det_rec, ids);
    } else {
      const ToyDetectorParams<float> p = detector_from_checkpoint(read_checkpoint(checkpoint));
      const Dataset ds = read_dataset(data);
      det_boxes = detect(p, ds.scenes, conf, iou);
      for (const Scene& s : ds.scenes) gt_boxes.push_back(s.gts);
      for (int k = 0; k < p.classes(); ++k) present.insert(k);
      if (!dets_out.empty()) {
        std::vector<DetectionRecord> recs;
        for (std::size_t i = 0; i < det_boxes.size(); ++i) {
          for (const DetBox& b : det_boxes[i]) recs.push_back({ds.ids[i], b});
        }
        write_detections(dets_out, recs, true);
      }
    }
    std::vector<int> cls = classes;
    if (cls.empty()) cls.assign(present.begin(), present.end());
    if (cls.empty()) throw std::invalid_argument("eval: no classes to evaluate");
    print_report(evaluate(det_boxes, gt_boxes, cls), report_out);
    return kOk;
  }
};

// gradcheck

struct GradCheck {
  SuiteOptions opts;

  void add(CLI::App* app) {
    app->add_option("--instances", opts.instances, "Random instances per op")->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--seed", opts.seed, "Seed")->capture_default_str();
    app->add_option("--samples", opts.samples_per_tensor, "Sampled coordinates per tensor")->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--filter", opts.filter, "Only ops whose name contains this");
  }

  int run() const {
    std::cout << std::left << std::setw(24) << "op" << std::setw(14) << "max_rel_err" << std::setw(11) << "tolerance"
              << std::setw(10) << "checked" << std::setw(9) << "skipped" << "status\n";
    bool ok = true;
    const auto results = run_gradient_suite(opts, [&](const OpCheck& r) {
      ok = ok && r.passed();
      std::cout << std::left << std::setw(24) << r.op << std::setw(14) << std::setprecision(3) << r.max_rel_error
                << std::setw(11) << r.tolerance << std::setw(10) << r.checked << std::setw(9) << r.skipped_kinks
                << (r.passed() ? "ok" : "FAIL") << std::endl;
      if (!r.passed()) std::cout << "  worst: " << r.worst << '\n';
    });
    if (results.empty()) throw UsageError("--filter matched no op");
    return ok ? kOk : kNumerical;
  }
};

// bench

struct Bench {
  BenchOptions opts;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--channels", opts.channels, "Channel counts")->delimiter(',')->capture_default_str();
    app->add_option("--sides", opts.sides, "Square spatial sides")->delimiter(',')->capture_default_str();
    app->add_option("--batch", opts.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--repeats", opts.repeats, "Timed repeats per row (median reported)")->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--seed", opts.seed, "Seed")->capture_default_str();
    app->add_option("--out", out, "Write the CSV here as well as to stdout");
  }

  int run() const {
    for (Index v : opts.channels) {
      if (v < 1) throw UsageError("--channels entries must be >= 1");
    }
    for (Index v : opts.sides) {
      if (v < 1) throw UsageError("--sides entries must be >= 1");
    }
    std::string csv = bench_csv_header() + '\n';
    for (const BenchRow& r : run_bench(opts)) csv += bench_csv_row(r) + '\n';
    if (!out.empty()) write_text_atomic(out, csv);
    std::cout << csv;
    std::cerr << "# attention flops (channel c x c vs spatial hw x hw)\n";
    for (Index c : opts.channels) {
      for (Index s : opts.sides) {
        const std::uint64_t ch = channel_attention_flops(c, s * s);
        const std::uint64_t sp = spatial_attention_flops(c, s * s);
        std::cerr << "c=" << c << " hw=" << s * s << " channel=" << ch << " spatial=" << sp
                  << " ratio=" << static_cast<double>(sp) / static_cast<double>(ch) << '\n';
      }
    }
    return kOk;
  }
};

// forward

struct Forward {
  std::string checkpoint;
  std::string input;
  std::string output;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Detector checkpoint")->required();
    app->add_option("--input", input, "Input TensorFile, (n, 1, h, w) or (h, w)")->required();
    app->add_option("--output", output, "Output TensorFile of raw grid predictions")->required();
  }

  int run() const {
    const ToyDetectorParams<float> p = detector_from_checkpoint(read_checkpoint(checkpoint));
    const Tensor4<float> x = from_raw<float>(decode_tensor(read_file(input)));
    write_tensor(output, detector_forward(x, p));
    std::cout << "output=" << output << '\n';
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy CAF-block detector: data, training, evaluation and checks"};
  app.require_subcommand(1);

  GenData gen;
  Train tr;
  Eval ev;
  GradCheck gc;
  Bench bn;
  Forward fw;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  CLI::App* train_cmd = app.add_subcommand("train", "Train the detector with SGD");
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate detections or a checkpoint");
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks of every op");
  CLI::App* bench_cmd = app.add_subcommand("bench", "Time kernels and compare attention costs");
  CLI::App* fwd_cmd = app.add_subcommand("forward", "Run one forward pass from a checkpoint");
  gen.add(gen_cmd);
  tr.add(train_cmd);
  ev.add(eval_cmd);
  gc.add(gc_cmd);
  bn.add(bench_cmd);
  fw.add(fwd_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return gen.run();
    if (*train_cmd) return tr.run();
    if (*eval_cmd) return ev.run();
    if (*gc_cmd) return gc.run();
    if (*bench_cmd) return bn.run();
    if (*fwd_cmd) return fw.run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::domain_error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
