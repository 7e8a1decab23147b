#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "sgfnet/config.hpp"
#include "sgfnet/gradcheck_suite.hpp"
#include "sgfnet/hpf.hpp"
#include "sgfnet/train.hpp"

namespace fs = std::filesystem;
using namespace sgfnet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

// A checkpoint directory holds the resolved config next to the trainer state.
Trainer<float> load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("checkpoint " + dir.string() + " not found");
  const RunConfig rc = load_config(dir / "config.txt");
  Trainer<float> t(rc.net);
  t.load(dir);
  return t;
}

void save_checkpoint(Trainer<float>& t, const RunConfig& rc, const fs::path& dir) {
  fs::create_directories(dir);
  t.save(dir);
  write_text(dir / "config.txt", to_text(rc));
}

int cmd_gen(const fs::path& out, std::size_t n, std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed) {
  save_dataset(out, gen_dataset(n, h, w, k, seed), {n, h, w, k, seed});
  std::cout << "wrote " << n << " samples to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig rc = config_path.empty() ? RunConfig{} : load_config(config_path);
  for (const auto& o : overrides) apply_override(rc, o);
  if (rc.data.empty()) throw ConfigError("train: no dataset (set data = DIR)");
  DatasetMeta meta;
  const auto train = load_dataset(rc.data, &meta);
  rc.match_dataset(meta);
  try {
    rc.net.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  std::vector<SegSample> val;
  if (!rc.val_data.empty()) {
    DatasetMeta vmeta;
    val = load_dataset(rc.val_data, &vmeta);
    if (vmeta.height != meta.height || vmeta.width != meta.width || vmeta.classes != meta.classes) {
      throw DimensionError("validation set " + rc.val_data + " differs from training set in size or classes");
    }
  }

  const fs::path out(rc.out);
  fs::create_directories(out);
  write_text(out / "config.txt", to_text(rc));
  Trainer<float> trainer(rc.net);
  if (!rc.resume.empty()) {
    trainer.load(rc.resume);
    std::cout << "resumed from " << rc.resume << " at epoch " << trainer.epoch() << '\n';
  }
  std::ofstream log(out / "log.txt", rc.resume.empty() ? std::ios::trunc : std::ios::app);
  trainer.fit(train, val.empty() ? nullptr : &val, [&](const EpochLog& e) {
    const std::string line = format_log(e);
    std::cout << line << std::endl;
    log << line << std::endl;
    save_checkpoint(trainer, rc, out / "ckpt");
  });
  if (trainer.epoch() == 0 || !fs::exists(out / "ckpt")) save_checkpoint(trainer, rc, out / "ckpt");
  std::cout << "checkpoint " << (out / "ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data) {
  const auto trainer = load_checkpoint(ckpt);
  DatasetMeta meta;
  const auto samples = load_dataset(data, &meta);
  if (meta.classes != trainer.config().num_classes) {
    throw DimensionError("dataset has " + std::to_string(meta.classes) + " classes, checkpoint " +
                         std::to_string(trainer.config().num_classes));
  }
  const auto m = metrics(trainer.evaluate(samples));
  std::printf("%-6s %8s %8s\n", "class", "Acc", "IoU");
  for (std::size_t c = 0; c < m.acc.size(); ++c) {
    if (m.present[c]) std::printf("%-6zu %8.4f %8.4f\n", c, m.acc[c], m.iou[c]);
    else std::printf("%-6zu %8s %8s\n", c, "-", "-");
  }
  std::printf("mAcc %.4f  mIoU %.4f\n", m.macc, m.miou);
  return kOk;
}

int cmd_infer(const fs::path& ckpt, const fs::path& rgb, const fs::path& th, const fs::path& out, fs::path color) {
  const auto trainer = load_checkpoint(ckpt);
  std::vector<SegSample> one{load_sample(rgb, th)};
  const std::vector<std::size_t> idx{0};
  const auto labels = trainer.predict(one, idx);
  Image lbl(1, one[0].height, one[0].width);
  lbl.pixels = labels;
  write_image_file(out, lbl);
  if (color.empty()) color = fs::path(out).replace_extension("").string() + "_color.ppm";
  Image vis(3, lbl.height, lbl.width);
  const std::size_t k = trainer.config().num_classes;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = class_color(labels[i], k);
    for (std::size_t ch = 0; ch < 3; ++ch) vis.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(c[ch] * 255.0f));
  }
  write_image_file(color, vis);
  std::cout << "wrote " << out.string() << " and " << color.string() << '\n';
  return kOk;
}

int cmd_hpf(const fs::path& in, double cutoff, const fs::path& out) {
  std::ifstream file(in, std::ios::binary);
  if (!file) throw Error("cannot open " + in.string());
  write_image_file(out, hpf::filter_image(read_netpbm(file), cutoff));
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t size, const std::string& fault) {
  if (!fault.empty()) backward_fault().op = fault;
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(seed, size)) {
    std::printf("%-30s %.3e  tol %.0e  %s\n", r.name.c_str(), r.max_error, r.tolerance, r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  std::printf("%s\n", ok ? "all gradients match" : "gradient mismatch");
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-thermal segmentation with spectral-guided fusion"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic RGB-thermal dataset");
  gen->set_help_flag("--help", "Print this help message and exit");  // --h is the height
  std::string gen_out;
  std::size_t gen_n = 250, gen_h = 64, gen_w = 96, gen_k = 4;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--n", gen_n, "Number of samples")->capture_default_str();
  gen->add_option("--h", gen_h, "Image height (multiple of 16)")->capture_default_str();
  gen->add_option("--w", gen_w, "Image width (multiple of 16)")->capture_default_str();
  gen->add_option("--k", gen_k, "Number of classes, background included")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a model; writes config.txt, log.txt and ckpt/ under the output directory");
  std::string train_config;
  std::vector<std::string> train_set;
  train->add_option("--config", train_config, "Config file of key = value lines")->check(CLI::ExistingFile);
  train->add_option("--set", train_set, "Override a config key, as key=value (repeatable)");

  auto* eval = app.add_subcommand("eval", "Print per-class accuracy and IoU of a checkpoint on a dataset");
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();

  auto* infer = app.add_subcommand("infer", "Segment one RGB/thermal pair");
  std::string infer_ckpt, infer_rgb, infer_th, infer_out, infer_color;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint directory")->required();
  infer->add_option("--rgb", infer_rgb, "RGB image (binary PPM)")->required();
  infer->add_option("--th", infer_th, "Thermal image (binary PGM)")->required();
  infer->add_option("--out", infer_out, "Label map output (PGM, pixel value = class)")->required();
  infer->add_option("--color", infer_color, "Colour-coded output (PPM); default <out>_color.ppm");

  auto* hpf_cmd = app.add_subcommand("hpf", "DCT high-pass filter a grayscale or colour image");
  std::string hpf_in, hpf_out;
  double hpf_cutoff = 0.1;
  hpf_cmd->add_option("--in", hpf_in, "Input image (PGM or PPM)")->required();
  hpf_cmd->add_option("--cutoff", hpf_cutoff, "Normalized frequency cutoff in [0,1]")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  hpf_cmd->add_option("--out", hpf_out, "Output PGM; zero response maps to gray 128 when cutoff > 0")->required();

  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  std::uint64_t grad_seed = 0;
  std::size_t grad_size = 4;
  std::string grad_fault;
  grad->add_option("--seed", grad_seed, "First of three seeds")->capture_default_str();
  grad->add_option("--size", grad_size, "Spatial size of the test tensors")->capture_default_str();
  grad->add_option("--inject-fault", grad_fault, "Scale the backward pass of this op")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_out, gen_n, gen_h, gen_w, gen_k, gen_seed);
    if (*train) return cmd_train(train_config, train_set);
    if (*eval) return cmd_eval(eval_ckpt, eval_data);
    if (*infer) return cmd_infer(infer_ckpt, infer_rgb, infer_th, infer_out, infer_color);
    if (*hpf_cmd) return cmd_hpf(hpf_in, hpf_cutoff, hpf_out);
    if (*grad) return cmd_gradcheck(grad_seed, grad_size, grad_fault);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
