#include "cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "can/autograd.hpp"
#include "can/conv.hpp"
#include "can/data.hpp"
#include "can/errors.hpp"
#include "can/gradcheck.hpp"
#include "can/network.hpp"
#include "can/train.hpp"

namespace can::cli {
namespace fs = std::filesystem;

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d{
      // shared
      {"seed", "7"},
      {"threads", "1"},
      {"net", "tinycan"},
      {"frames", "8"},
      {"data", ""},
      // generate
      {"clips_per_class", "200"},
      {"noise", "0.05"},
      // train / eval
      {"train_fraction", "0.8"},
      {"split_seed", "7"},
      {"epochs", "30"},
      {"batch", "16"},
      {"lr", "0.01"},
      {"lr_steps", "20,25"},
      {"lr_decay", "0.1"},
      {"momentum", "0.9"},
      {"weight_decay", "0.0001"},
      {"calibration_clips", "40"},
      {"residual_scale", "0.3"},
      {"checkpoint", ""},
      {"split", "val"},
      // gradcheck
      {"modules", "all"},
      {"gradcheck_seeds", "3"},
      // bench
      {"iterations", "5"},
  };
  return d;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': '" + text + "' is not a valid number");
  }
  return v;
}

}  // namespace

RunConfig::RunConfig() : values_(defaults()) {}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  if (value.find('\n') != std::string::npos) throw ConfigError("config key '" + key + "': value spans lines");
  it->second = value;
}

void RunConfig::assign(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::string line;
  std::size_t number = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = path + ":" + std::to_string(number) + ": ";
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (const auto [it, fresh] = seen.emplace(key, number); !fresh) {
      throw ConfigError(where + "key '" + key + "' already set on line " + std::to_string(it->second));
    }
    try {
      set(key, trim(std::string_view(t).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::integer(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

double RunConfig::number(const std::string& key) const { return parse_number<double>(key, get(key)); }

std::vector<std::size_t> RunConfig::integers(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const std::string& w : split_commas(get(key))) out.push_back(parse_number<std::size_t>(key, w));
  return out;
}

std::vector<std::string> RunConfig::words(const std::string& key) const { return split_commas(get(key)); }

std::string RunConfig::text() const {
  std::string s;
  for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
  return s;
}

std::string sha1_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

namespace {

struct Context {
  std::string command;
  RunConfig config;
  std::string out_dir;  // empty: print only
  std::ostream& out;
  std::ostream& err;

  fs::path path(const std::string& leaf) const { return fs::path(out_dir) / leaf; }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw IoError("cannot write '" + path.string() + "'");
}

// Creates the output directory and records the run before any work starts.
void begin_run(Context& ctx, bool out_required) {
  if (ctx.out_dir.empty()) {
    if (out_required) throw ConfigError(ctx.command + " needs --out DIR");
    return;
  }
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec || !fs::is_directory(ctx.out_dir)) throw ConfigError("cannot create output directory '" + ctx.out_dir + "'");
  const std::string text = ctx.config.text();
  write_text(ctx.path("config.txt"), "# can " + ctx.command + "\n" + text);
  const std::string id = sha1_hex(ctx.command + "\n" + text);
  write_text(ctx.path("run_id"), id + "\n");
  ctx.out << "run " << id << '\n';
}

std::string existing_file(const RunConfig& c, const std::string& key) {
  const std::string& p = c.get(key);
  if (p.empty()) throw ConfigError("config key '" + key + "' must name a file");
  if (!fs::is_regular_file(p)) throw ConfigError(key + " file '" + p + "' does not exist");
  return p;
}

std::size_t threads_of(const RunConfig& c) {
  const std::uint64_t n = c.integer("threads");
  if (n == 0) throw ConfigError("threads must be >= 1");
  return std::size_t(n);
}

NetSpec spec_of(const RunConfig& c) { return named_spec(c.get("net"), std::size_t(c.integer("frames"))); }

Split split_of(const RunConfig& c, const Dataset& d) {
  return split_indices(d.clips.size(), c.number("train_fraction"), c.integer("split_seed"));
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---- generate

int cmd_generate(Context& ctx) {
  const RunConfig& c = ctx.config;
  SynthConfig s;
  s.seed = c.integer("seed");
  s.clips_per_class = std::size_t(c.integer("clips_per_class"));
  s.frames = std::size_t(c.integer("frames"));
  s.noise = c.number("noise");
  begin_run(ctx, true);
  const Dataset d = generate(s);
  write_dataset(ctx.path("data.canv").string(), d);
  ctx.out << "wrote " << d.clips.size() << " clips to " << ctx.path("data.canv").string() << '\n';
  return kExitOk;
}

// ---- train

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = std::size_t(c.integer("epochs"));
  t.batch = std::size_t(c.integer("batch"));
  t.lr = c.number("lr");
  t.momentum = c.number("momentum");
  t.weight_decay = c.number("weight_decay");
  t.lr_steps = c.integers("lr_steps");
  t.lr_decay = c.number("lr_decay");
  t.seed = c.integer("seed");
  t.threads = threads_of(c);
  t.validate();
  return t;
}

int cmd_train(Context& ctx) {
  const RunConfig& c = ctx.config;
  const std::string data_path = existing_file(c, "data");
  const TrainConfig tc = train_config(c);
  const NetSpec spec = spec_of(c);
  begin_run(ctx, true);

  const Dataset d = read_dataset(data_path);
  NetParams p = NetParams::create(spec, c.integer("seed"));
  check_compatible(p, d);
  const Split split = split_of(c, d);
  if (const std::uint64_t n = c.integer("calibration_clips"); n > 0) {
    calibrate_on(p, d, split.train, std::size_t(n), real(c.number("residual_scale")));
  }

  std::ofstream log(ctx.path("metrics.tsv"), std::ios::trunc);
  log << "epoch\ttrain_loss\ttrain_top1\tval_top1\tval_top5\n";
  const std::string best_path = ctx.path("best.canc").string();
  const TrainResult r = train(p, d, split, tc, [&](const EpochMetrics& m, const NetParams& cur, bool improved) {
    log << m.epoch << '\t' << fixed(m.train_loss) << '\t' << fixed(m.train_top1) << '\t' << fixed(m.val_top1)
        << '\t' << fixed(m.val_top5) << '\n';
    log.flush();
    if (improved) save_checkpoint(best_path, cur);
    ctx.out << "epoch " << m.epoch << " lr " << m.lr << " loss " << fixed(m.train_loss, 4) << " train "
            << fixed(m.train_top1, 3) << " val " << fixed(m.val_top1, 3) << " (" << fixed(m.seconds, 1) << "s)"
            << (improved ? " *" : "") << std::endl;
  });
  if (!log) throw IoError("cannot write '" + ctx.path("metrics.tsv").string() + "'");
  save_checkpoint(ctx.path("last.canc").string(), p);
  if (r.best_epoch == 0) save_checkpoint(best_path, p);
  ctx.out << "best epoch " << r.best_epoch << " val_top1 " << fixed(r.best_val_top1) << '\n';
  return kExitOk;
}

// ---- eval

int cmd_eval(Context& ctx) {
  const RunConfig& c = ctx.config;
  const std::string data_path = existing_file(c, "data");
  const std::string ckpt_path = existing_file(c, "checkpoint");
  const std::string which = c.get("split");
  if (which != "val" && which != "train" && which != "all") {
    throw ConfigError("split must be val, train or all, got '" + which + "'");
  }
  const std::size_t threads = threads_of(c);
  const NetSpec spec = spec_of(c);
  begin_run(ctx, true);

  const Dataset d = read_dataset(data_path);
  NetParams p = NetParams::create(spec, c.integer("seed"));
  check_compatible(p, d);
  load_checkpoint(ckpt_path, p);
  std::vector<std::size_t> idx;
  if (which == "all") {
    idx.resize(d.clips.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  } else {
    const Split s = split_of(c, d);
    idx = which == "val" ? s.val : s.train;
  }
  const EvalResult r = evaluate(p, d, idx, threads);
  write_text(ctx.path("eval.tsv"), "split\tclips\tloss\ttop1\ttop5\n" + which + '\t' + std::to_string(r.count) +
                                       '\t' + fixed(r.loss) + '\t' + fixed(r.top1) + '\t' + fixed(r.top5) + '\n');
  std::string preds = "clip\tlabel\tprediction\n";
  for (std::size_t i = 0; i < idx.size(); ++i) {
    preds += std::to_string(idx[i]) + '\t' + std::to_string(d.clips[idx[i]].label) + '\t' +
             std::to_string(r.predictions[i]) + '\n';
  }
  write_text(ctx.path("predictions.tsv"), preds);
  ctx.out << which << " clips " << r.count << " loss " << fixed(r.loss) << " top1 " << fixed(r.top1) << " top5 "
          << fixed(r.top5) << '\n';
  return kExitOk;
}

// ---- gradcheck

int cmd_gradcheck(Context& ctx, const std::string& fault) {
  const RunConfig& c = ctx.config;
  std::vector<std::string> modules = c.words("modules");
  if (modules.empty()) throw ConfigError("gradcheck: empty module list");
  if (modules == std::vector<std::string>{"all"}) modules = gradcheck_modules();
  for (const std::string& m : modules) {
    if (std::find(gradcheck_modules().begin(), gradcheck_modules().end(), m) == gradcheck_modules().end()) {
      throw ConfigError("gradcheck: unknown module '" + m + "'");
    }
  }
  const std::uint64_t seeds = c.integer("gradcheck_seeds");
  if (seeds == 0) throw ConfigError("gradcheck: gradcheck_seeds must be >= 1");
  begin_run(ctx, false);

  struct FaultScope {
    explicit FaultScope(const std::string& op) {
      try {
        set_adjoint_fault(op);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    ~FaultScope() { set_adjoint_fault(""); }
  } scope(fault);

  std::string table = "module\tseed\tmax_rel_error\tchecked\tworst\tseconds\n";
  std::vector<std::string> failed;
  for (const std::string& m : modules) {
    real worst = 0;
    for (std::uint64_t k = 0; k < seeds; ++k) {
      const GradcheckResult r = gradcheck(m, c.integer("seed") + k);
      char err[32];
      std::snprintf(err, sizeof err, "%.3e", double(r.max_rel_error));
      const std::string row = m + '\t' + std::to_string(r.seed) + '\t' + err + '\t' + std::to_string(r.checked) +
                              '\t' + r.worst + '\t' + fixed(r.seconds, 2) + '\n';
      table += row;
      ctx.out << row << std::flush;
      if (!(r.max_rel_error <= worst)) worst = r.max_rel_error;
    }
    if (!(worst <= kGradcheckTolerance)) failed.push_back(m);
  }
  if (!ctx.out_dir.empty()) write_text(ctx.path("gradcheck.tsv"), table);
  if (failed.empty()) {
    ctx.out << "all " << modules.size() << " modules within 1e-4\n";
    return kExitOk;
  }
  std::string names;
  for (const std::string& m : failed) names += (names.empty() ? "" : ", ") + m;
  ctx.err << "gradcheck failed: " << names << '\n';
  return kExitNumeric;
}

// ---- count

int cmd_count(Context& ctx) {
  const NetSpec spec = spec_of(ctx.config);
  begin_run(ctx, false);
  const CostReport r = count_cost(spec);
  std::string table = "layer\tparams\tmacs\n";
  for (const LayerCost& l : r.layers) table += l.name + '\t' + std::to_string(l.params) + '\t' + std::to_string(l.macs) + '\n';
  table += "total\t" + std::to_string(r.params()) + '\t' + std::to_string(r.macs()) + '\n';
  ctx.out << table;
  ctx.out << spec.name << " T=" << spec.frames << ": " << fixed(double(r.params()) / 1e6, 1) << "M params, "
          << fixed(double(r.macs()) / 1e9, 1) << "G MACs\n";
  if (!ctx.out_dir.empty()) write_text(ctx.path("cost.tsv"), table);
  return kExitOk;
}

// ---- bench

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

int cmd_bench(Context& ctx) {
  const std::uint64_t k = ctx.config.integer("iterations");
  if (k == 0) throw ConfigError("bench: iterations must be >= 1");
  begin_run(ctx, false);
  Rng rng(ctx.config.integer("seed"));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](const Dims& d) {
    VideoTensor x(d);
    for (real& v : x.data()) v = real(normal(rng));
    return x;
  };

  std::string table = "kernel\tshape\titerations\tmedian_ms\tmin_ms\n";
  auto time = [&](const std::string& name, const std::string& shape, const std::function<void()>& f) {
    std::vector<double> ms;
    for (std::uint64_t i = 0; i < k; ++i) {
      const auto start = std::chrono::steady_clock::now();
      f();
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
    }
    const std::string row = name + '\t' + shape + '\t' + std::to_string(k) + '\t' + fixed(median(ms), 3) + '\t' +
                            fixed(*std::min_element(ms.begin(), ms.end()), 3) + '\n';
    table += row;
    ctx.out << row << std::flush;
  };

  const VideoTensor x = random(Dims{1, 8, 56, 56, 64});
  ConvKernel kernel{ConvGeometry::same(64, 64, {3, 1, 1}), {}, {}};
  kernel.weights.resize(kernel.geometry.weight_count());
  for (real& w : kernel.weights) w = real(normal(rng)) / 8;
  const std::string conv_shape = x.dims().str() + " k3x1x1 64->64";
  time("conv3d", conv_shape, [&] { (void)conv3d(x, kernel); });
  time("conv3d_oracle", conv_shape, [&] { (void)conv3d_oracle(x, kernel); });

  ConvKernel spatial{ConvGeometry::same(64, 64, {1, 3, 3}), {}, {}};
  spatial.weights.resize(spatial.geometry.weight_count());
  for (real& w : spatial.weights) w = real(normal(rng)) / 24;
  time("conv3d", x.dims().str() + " k1x3x3 64->64", [&] { (void)conv3d(x, spatial); });

  for (const char* name : {"tinycan", "tinycan-baseline"}) {
    const NetParams p = NetParams::create(named_spec(name), ctx.config.integer("seed"));
    const VideoTensor clip = random(p.spec.input_dims(1));
    time(std::string(name) + "_forward", clip.dims().str(), [&] { (void)net_forward(p, clip); });
    const std::array<std::size_t, 1> label{0};
    time(std::string(name) + "_train_step", clip.dims().str(), [&] {
      Tape tape;
      const Var loss = tape.cross_entropy(net_forward(tape, tape.leaf(clip, false), p), label);
      tape.backward(loss, VideoTensor(tape.value(loss).dims(), real(1)));
    });
  }
  if (!ctx.out_dir.empty()) write_text(ctx.path("bench.tsv"), table);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Context-aware video network: data, training, evaluation, gradient checks, cost, timing", "can"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, fault;
  std::vector<std::string> sets;
  std::uint64_t seed = 0, threads = 0;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--seed", seed, "overrides the seed key");
    sub->add_option("--out", out_dir, "output directory (everything is written here)");
    sub->add_option("--threads", threads, "overrides the threads key");
    sub->add_option("--set", sets, "key=value override, repeatable")->take_all();
    return sub;
  };
  common(app.add_subcommand("generate", "write a synthetic motion dataset to OUT/data.canv"));
  common(app.add_subcommand("train", "train a network; writes metrics.tsv, best.canc and last.canc"));
  common(app.add_subcommand("eval", "evaluate a checkpoint on a split"));
  common(app.add_subcommand("gradcheck", "finite-difference gradient certification"))
      ->add_option("--fault", fault, "self-test: corrupt one adjoint (sigmoid, conv3d, ...)");
  common(app.add_subcommand("count", "analytic parameter and MAC count"));
  common(app.add_subcommand("bench", "median wall time per kernel and per network pass (TSV)"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    Context ctx{app.get_subcommands().front()->get_name(), RunConfig{}, out_dir, out, err};
    if (!config_path.empty()) ctx.config.load_file(config_path);
    for (const std::string& s : sets) ctx.config.assign(s);
    const auto* sub = app.get_subcommands().front();
    if (sub->count("--seed")) ctx.config.set("seed", std::to_string(seed));
    if (sub->count("--threads")) ctx.config.set("threads", std::to_string(threads));

    if (ctx.command == "generate") return cmd_generate(ctx);
    if (ctx.command == "train") return cmd_train(ctx);
    if (ctx.command == "eval") return cmd_eval(ctx);
    if (ctx.command == "gradcheck") return cmd_gradcheck(ctx, fault);
    if (ctx.command == "count") return cmd_count(ctx);
    return cmd_bench(ctx);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
}

}  // namespace can::cli
