#include "higfa/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "higfa/error.hpp"

namespace higfa::config {

namespace {

using Setter = std::function<void(CliConfig&, const std::string&)>;

struct Key {
  const char* section;
  const char* name;
  const char* fallback;
  Setter set;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) throw Error("empty list item");
    out.push_back(item);
  }
  if (out.empty()) throw Error("empty list");
  return out;
}

double to_double(const std::string& s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw Error("'" + s + "' is not a number");
  return v;
}

long long to_int(const std::string& s) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw Error("'" + s + "' is not an integer");
  return v;
}

int to_int32(const std::string& s) {
  const long long v = to_int(s);
  if (v < -2147483647LL || v > 2147483647LL) throw Error("'" + s + "' out of range");
  return static_cast<int>(v);
}

std::size_t to_count(const std::string& s) {
  const long long v = to_int(s);
  if (v < 1) throw Error("'" + s + "' must be a positive integer");
  return static_cast<std::size_t>(v);
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error("'" + s + "' is not a boolean");
}

template <class T, class F>
std::vector<T> list_of(const std::string& s, F conv) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) out.push_back(conv(item));
  return out;
}

#define DBL(field) [](CliConfig& c, const std::string& v) { c.field = to_double(v); }
#define INT(field) [](CliConfig& c, const std::string& v) { c.field = to_int32(v); }
#define CNT(field) [](CliConfig& c, const std::string& v) { c.field = to_count(v); }
#define BOOL(field) [](CliConfig& c, const std::string& v) { c.field = to_bool(v); }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      {"benchmark", "classes", "4", INT(experiment.benchmark.classes)},
      {"benchmark", "per_class", "64", INT(experiment.benchmark.per_class)},
      {"benchmark", "noise", "6", DBL(experiment.benchmark.noise)},
      {"benchmark", "jitter", "true", BOOL(experiment.benchmark.jitter)},
      {"benchmark", "styles", "4", INT(experiment.benchmark.styles)},
      {"benchmark", "max_shift", "2", INT(experiment.benchmark.max_shift)},
      {"benchmark", "train_fraction", "0.375", DBL(experiment.benchmark.train_fraction)},
      {"benchmark", "val_fraction", "0.125", DBL(experiment.benchmark.val_fraction)},

      {"diffusion", "inference_steps", "30", INT(experiment.training.inference_steps)},

      {"guidance", "s_cfg", "7.5", DBL(experiment.guidance.s_cfg)},
      {"guidance", "s_ctl", "1.0", DBL(experiment.guidance.s_ctl)},
      {"guidance", "s_cls", "5", DBL(experiment.guidance.s_cls)},
      {"guidance", "warmup_steps", "20", INT(experiment.guidance.warmup_steps)},
      {"guidance", "sigma", "1", DBL(experiment.guidance.sigma)},
      {"guidance", "confidence_floor", "1e-6", DBL(experiment.guidance.confidence_floor)},
      {"guidance", "confidence_ceiling", "0.999999", DBL(experiment.guidance.confidence_ceiling)},
      {"guidance", "adaptive", "true", BOOL(experiment.guidance.adaptive)},

      {"contour", "canny_low", "120", INT(experiment.augment.contour.canny_low)},
      {"contour", "canny_high", "200", INT(experiment.augment.contour.canny_high)},
      {"contour", "binarize_threshold", "100", INT(experiment.augment.contour.binarize_threshold)},
      {"contour", "flip_probability", "0.5", DBL(experiment.augment.contour.flip_probability)},
      {"contour", "max_rotation_deg", "15", DBL(experiment.augment.contour.max_rotation_deg)},
      {"contour", "grid", "8", INT(experiment.augment.contour.grid)},
      {"contour", "control_points", "5", INT(experiment.augment.contour.control_points)},
      {"contour", "perturbation", "auto",
       [](CliConfig& c, const std::string& v) {
         if (v == "auto") c.experiment.augment.contour.perturbation.reset();
         else c.experiment.augment.contour.perturbation = to_double(v);
       }},
      {"contour", "regularization", "0", DBL(experiment.augment.contour.regularization)},
      {"contour", "rigidity", "rigid",
       [](CliConfig& c, const std::string& v) {
         if (v == "rigid") c.experiment.augment.rigidity = contour::Rigidity::rigid;
         else if (v == "nonrigid") c.experiment.augment.rigidity = contour::Rigidity::nonrigid;
         else throw Error("'" + v + "' is not rigid or nonrigid");
       }},
      {"contour", "harris_sigma", "1", DBL(experiment.augment.contour.harris.sigma)},
      {"contour", "harris_k", "0.04", DBL(experiment.augment.contour.harris.k)},
      {"contour", "harris_threshold", "0.01", DBL(experiment.augment.contour.harris.relative_threshold)},

      {"models", "denoiser_epochs", "500", INT(experiment.training.denoiser_epochs)},
      {"models", "denoiser_batch", "64", CNT(experiment.training.denoiser_batch)},
      {"models", "denoiser_lr", "0.001", DBL(experiment.training.denoiser_lr)},
      {"models", "denoiser_hidden", "256", CNT(experiment.training.denoiser_hidden)},
      {"models", "cond_drop_prob", "0.1", DBL(experiment.training.cond_drop_prob)},
      {"models", "pair_augment", "3", INT(experiment.training.pair_augment)},
      {"models", "classifier_epochs", "400", INT(experiment.training.classifier_epochs)},
      {"models", "classifier_batch", "32", CNT(experiment.training.classifier_batch)},
      {"models", "classifier_lr", "0.001", DBL(experiment.training.classifier_lr)},
      {"models", "classifier_input_noise", "0.1", DBL(experiment.training.classifier_input_noise)},
      {"models", "classifier_shift", "2", INT(experiment.training.classifier_shift)},
      {"models", "downstream_epochs", "200", INT(experiment.training.downstream_epochs)},
      {"models", "downstream_batch", "32", CNT(experiment.training.downstream_batch)},
      {"models", "downstream_lr", "0.001", DBL(experiment.training.downstream_lr)},
      {"models", "downstream_input_noise", "0.1", DBL(experiment.training.downstream_input_noise)},
      {"models", "downstream_shift", "0", INT(experiment.training.downstream_shift)},
      {"models", "downstream_restarts", "5", INT(experiment.training.downstream_restarts)},
      {"models", "optimizer", "adam",
       [](CliConfig& c, const std::string& v) {
         if (v == "adam") c.experiment.training.optimizer = models::Optimizer::adam;
         else if (v == "sgd") c.experiment.training.optimizer = models::Optimizer::sgd;
         else throw Error("'" + v + "' is not adam or sgd");
       }},

      {"augment", "per_image", "2", INT(experiment.augment.per_image)},
      {"augment", "mode", "higfa",
       [](CliConfig& c, const std::string& v) { c.augment_mode = harness::parse_mode(v); }},

      {"harness", "ratios", "0.4",
       [](CliConfig& c, const std::string& v) { c.experiment.ratios = list_of<double>(v, to_double); }},
      {"harness", "modes", "none,text_only,text_contour,higfa",
       [](CliConfig& c, const std::string& v) { c.modes = list_of<harness::Mode>(v, harness::parse_mode); }},
      {"harness", "seeds", "5", INT(seed_count)},
      {"harness", "few_shot_k", "none",
       [](CliConfig& c, const std::string& v) {
         if (v == "none") c.experiment.few_shot_k.reset();
         else c.experiment.few_shot_k = to_int32(v);
       }},
      {"harness", "jobs", "1", INT(experiment.jobs)},
      {"harness", "s_cls_sweep", "0,2,5,10,20",
       [](CliConfig& c, const std::string& v) { c.s_cls_sweep = list_of<double>(v, to_double); }},
      {"harness", "warmup_sweep", "10,15,20,21,25,30",
       [](CliConfig& c, const std::string& v) { c.warmup_sweep = list_of<int>(v, to_int32); }},
      {"harness", "ratio_sweep", "0.2,0.4,0.6,1.0",
       [](CliConfig& c, const std::string& v) { c.ratio_sweep = list_of<double>(v, to_double); }},
  };
  return k;
}

#undef DBL
#undef INT
#undef CNT
#undef BOOL

}  // namespace

void CliConfig::apply_seed(std::uint64_t seed) {
  experiment.benchmark.seed = seed;
  experiment.seeds.clear();
  for (int i = 0; i < seed_count; ++i) experiment.seeds.push_back(static_cast<std::uint64_t>(i + 1));
}

CliConfig parse_config(const std::string& text, const LogFn& log) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(std::string("config: ") + e.what());
  }

  std::map<std::string, std::map<std::string, std::string>> given;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw Error("config: key '" + section + "' outside any [section]");
    bool known = false;
    for (const auto& k : keys()) known = known || section == k.section;
    if (!known) throw Error("config: unknown section [" + section + "]");
    given[section];
    for (const auto& [name, value] : body) given[section][name] = trim(value.data());
  }

  for (const auto& [section, entries] : given) {
    for (const auto& [name, value] : entries) {
      bool known = false;
      for (const auto& k : keys()) known = known || (section == k.section && name == k.name);
      if (!known) throw Error("config: unknown key " + section + "." + name);
    }
  }

  CliConfig c;
  for (const auto& k : keys()) {
    const std::string full = std::string(k.section) + "." + k.name;
    std::string value = k.fallback;
    const auto sit = given.find(k.section);
    const bool present = sit != given.end() && sit->second.count(k.name);
    if (present) {
      value = sit->second.at(k.name);
    } else {
      c.defaulted.push_back(full);
      if (log) log("config: " + full + " not set, using default " + k.fallback);
    }
    try {
      k.set(c, value);
    } catch (const Error& e) {
      throw Error("config: " + full + ": " + e.what());
    }
  }
  if (c.seed_count < 1) throw Error("config: harness.seeds must be >= 1");
  c.apply_seed(c.experiment.benchmark.seed);
  return c;
}

CliConfig load_config(const std::filesystem::path& path, const LogFn& log) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), log);
}

std::string reference_config() {
  std::string out;
  std::string section;
  for (const auto& k : keys()) {
    if (section != k.section) {
      if (!section.empty()) out += '\n';
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += std::string(k.name) + " = " + k.fallback + "\n";
  }
  return out;
}

}  // namespace higfa::config
