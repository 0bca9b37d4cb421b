#include "mbias/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mbias/errors.hpp"
#include "mbias/rng.hpp"

namespace mbias {

namespace {

constexpr const char* kDatasetMagic = "#mbias-dataset v1";

std::vector<int> pattern_bits(const std::string& pattern) {
  std::vector<int> bits;
  for (char c : pattern) {
    if (c == 'G' || c == 'g')
      bits.push_back(1);
    else if (c == 'C' || c == 'c')
      bits.push_back(0);
    else
      throw ContractViolation("cell pattern '" + pattern + "' may only contain G and C");
  }
  return bits;
}

/// Fixed per-dataset feature prototypes (class signals, attribute embeddings).
struct Prototypes {
  std::vector<std::vector<double>> class_signal;             // [t] -> signal block / interior template
  std::vector<std::vector<std::vector<double>>> attr_embed;  // [d][a] -> bias block / color
};

Prototypes make_prototypes(const BiasGenSpec& spec) {
  Rng rng(derive_seed(spec.seed, "prototypes"));
  const auto& fm = spec.features;
  Prototypes p;
  if (fm.kind == FeatureKind::kLinear) {
    for (std::size_t t = 0; t < spec.num_classes; ++t) {
      std::vector<double> v(fm.signal_dim);
      for (double& e : v) e = fm.signal_scale * rng.normal();
      p.class_signal.push_back(std::move(v));
    }
    for (const auto& bt : spec.biases) {
      std::vector<std::vector<double>> rows;
      for (std::size_t a = 0; a < bt.alphabet; ++a) {
        std::vector<double> v(fm.bias_dim);
        for (double& e : v) e = fm.bias_scale * rng.normal();
        rows.push_back(std::move(v));
      }
      p.attr_embed.push_back(std::move(rows));
    }
  } else {
    const std::size_t inner = (fm.patch_size - 2) * (fm.patch_size - 2);
    for (std::size_t t = 0; t < spec.num_classes; ++t) {
      std::vector<double> v(inner);
      for (double& e : v) e = rng.bernoulli(0.5) ? fm.signal_scale : 0.0;
      p.class_signal.push_back(std::move(v));
    }
    for (const auto& bt : spec.biases) {
      std::vector<std::vector<double>> rows;
      for (std::size_t a = 0; a < bt.alphabet; ++a) {
        std::vector<double> v(fm.channels);
        for (double& e : v) e = fm.bias_scale * rng.normal();
        rows.push_back(std::move(v));
      }
      p.attr_embed.push_back(std::move(rows));
    }
  }
  return p;
}

void render(const BiasGenSpec& spec, const Prototypes& proto, int t, std::span<const int> b, Rng& rng,
            std::vector<double>& x) {
  const auto& fm = spec.features;
  x.assign(spec.feature_dim(), 0.0);
  if (fm.kind == FeatureKind::kLinear) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < fm.signal_dim; ++k)
      x[o++] = proto.class_signal[static_cast<std::size_t>(t)][k] + fm.signal_noise * rng.normal();
    for (std::size_t d = 0; d < b.size(); ++d)
      for (std::size_t k = 0; k < fm.bias_dim; ++k)
        x[o++] = proto.attr_embed[d][static_cast<std::size_t>(b[d])][k] + fm.bias_noise * rng.normal();
    return;
  }
  const std::size_t K = fm.patch_size, ch = fm.channels;
  auto pix = [&](std::size_t r, std::size_t c, std::size_t k) -> double& { return x[(r * K + c) * ch + k]; };
  for (std::size_t r = 0; r < K; ++r)
    for (std::size_t c = 0; c < K; ++c) {
      const bool interior = r > 0 && r + 1 < K && c > 0 && c + 1 < K;
      int owner = -1;  // which bias colors this border pixel
      if (c == 0)
        owner = 0;
      else if (c + 1 == K)
        owner = 1;
      else if (r == 0)
        owner = 2;
      else if (r + 1 == K)
        owner = 3;
      for (std::size_t k = 0; k < ch; ++k) {
        if (interior) {
          const double v = proto.class_signal[static_cast<std::size_t>(t)][(r - 1) * (K - 2) + (c - 1)];
          pix(r, c, k) = v + fm.signal_noise * rng.normal();
        } else if (owner >= 0 && static_cast<std::size_t>(owner) < b.size()) {
          const auto d = static_cast<std::size_t>(owner);
          pix(r, c, k) = proto.attr_embed[d][static_cast<std::size_t>(b[d])][k] + fm.bias_noise * rng.normal();
        }
      }
    }
}

int draw_conflicting(const BiasType& bt, int guide, Rng& rng) {
  auto r = static_cast<int>(rng.below(bt.alphabet - 1));
  return r >= guide ? r + 1 : r;
}

void emit(const BiasGenSpec& spec, const Prototypes& proto, int t, const std::vector<int>& bits, Rng& rng,
          Split& out) {
  std::vector<int> b(spec.num_biases());
  for (std::size_t d = 0; d < b.size(); ++d) {
    const auto& bt = spec.biases[d];
    const int guide = bt.guiding[static_cast<std::size_t>(t)];
    b[d] = bits[d] ? guide : draw_conflicting(bt, guide, rng);
  }
  std::vector<double> x;
  render(spec, proto, t, b, rng, x);
  out.push(x, t, b);
}

Split empty_split(const BiasGenSpec& spec) {
  Split s;
  s.feature_dim = spec.feature_dim();
  s.num_biases = spec.num_biases();
  return s;
}

/// Samples whose biases follow the training distribution (independent
/// guiding draws with probability p_d).
void emit_in_distribution(const BiasGenSpec& spec, const Prototypes& proto, int t, Rng& rng, Split& out) {
  std::vector<int> bits(spec.num_biases());
  for (std::size_t d = 0; d < bits.size(); ++d) bits[d] = rng.bernoulli(spec.biases[d].p_guiding) ? 1 : 0;
  emit(spec, proto, t, bits, rng, out);
}

Split balanced_split(const BiasGenSpec& spec, const Prototypes& proto, Rng& rng) {
  Split s = empty_split(spec);
  const std::size_t patterns = std::size_t{1} << spec.num_biases();
  for (std::size_t t = 0; t < spec.num_classes; ++t)
    for (std::size_t id = patterns; id-- > 0;) {
      const auto bits = group_bits(id, spec.num_biases());
      for (std::size_t i = 0; i < spec.eval_per_cell; ++i) emit(spec, proto, static_cast<int>(t), bits, rng, s);
    }
  return s;
}

void check_guiding_majority(const BiasGenSpec& spec, const Split& train) {
  for (std::size_t d = 0; d < spec.num_biases(); ++d) {
    const auto& bt = spec.biases[d];
    std::vector<std::vector<std::size_t>> counts(spec.num_classes, std::vector<std::size_t>(bt.alphabet, 0));
    for (std::size_t i = 0; i < train.size(); ++i)
      ++counts[static_cast<std::size_t>(train.t[i])][static_cast<std::size_t>(train.bias(i, d))];
    for (std::size_t t = 0; t < spec.num_classes; ++t) {
      const auto& c = counts[t];
      const std::size_t guide = static_cast<std::size_t>(bt.guiding[t]);
      if (std::all_of(c.begin(), c.end(), [](std::size_t v) { return v == 0; })) continue;
      for (std::size_t a = 0; a < c.size(); ++a) {
        if (a != guide && c[a] >= c[guide]) {
          throw GenerationError("guiding attribute " + std::to_string(guide) + " of bias type " +
                                std::to_string(d) + " ('" + bt.name + "') is not the strict majority in class " +
                                std::to_string(t) + " (" + std::to_string(c[guide]) + " vs " +
                                std::to_string(c[a]) + " for attribute " + std::to_string(a) + ")");
        }
      }
    }
  }
}

void write_double(std::ostream& os, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  os.write(buf, res.ptr - buf);
}

double parse_double(std::string_view tok) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw IoError("bad number '" + std::string(tok) + "' in dataset file");
  }
  return v;
}

const char* feature_kind_name(FeatureKind k) { return k == FeatureKind::kLinear ? "linear" : "patch"; }

}  // namespace

// ---------------------------------------------------------------------------

std::size_t BiasGenSpec::feature_dim() const {
  if (features.kind == FeatureKind::kLinear) return features.signal_dim + num_biases() * features.bias_dim;
  return features.patch_size * features.patch_size * features.channels;
}

void BiasGenSpec::validate() const {
  if (num_classes < 2) throw ContractViolation("BiasGenSpec: need at least two classes");
  if (biases.empty()) throw ContractViolation("BiasGenSpec: need at least one bias type");
  if (biases.size() > 16) throw ContractViolation("BiasGenSpec: at most 16 bias types");
  for (std::size_t d = 0; d < biases.size(); ++d) {
    const auto& bt = biases[d];
    if (bt.alphabet < 2) throw ContractViolation("bias type " + std::to_string(d) + ": alphabet must be >= 2");
    if (!(bt.p_guiding > 0.0 && bt.p_guiding < 1.0))
      throw ContractViolation("bias type " + std::to_string(d) + ": p_guiding must lie in (0, 1)");
    if (bt.guiding.size() != num_classes)
      throw ContractViolation("bias type " + std::to_string(d) + ": guiding map needs one entry per class");
    for (int g : bt.guiding)
      if (g < 0 || static_cast<std::size_t>(g) >= bt.alphabet)
        throw ContractViolation("bias type " + std::to_string(d) + ": guiding attribute out of range");
  }
  if (train_cells.empty() && train_counts.size() != num_classes)
    throw ContractViolation("BiasGenSpec: train_counts needs one entry per class");
  for (const auto& cell : train_cells) {
    if (cell.target < 0 || static_cast<std::size_t>(cell.target) >= num_classes)
      throw ContractViolation("train cell target out of range");
    if (cell.pattern.size() != biases.size())
      throw ContractViolation("train cell pattern '" + cell.pattern + "' must have one letter per bias type");
    pattern_bits(cell.pattern);
  }
  if (features.kind == FeatureKind::kPatch) {
    if (features.patch_size < 3) throw ContractViolation("patch_size must be >= 3");
    if (biases.size() > 4) throw ContractViolation("patch features support at most 4 bias types");
    if (features.channels == 0) throw ContractViolation("patch channels must be positive");
  } else if (features.signal_dim == 0 || features.bias_dim == 0) {
    throw ContractViolation("linear features need positive signal_dim and bias_dim");
  }
}

double expected_clean_fraction(const BiasGenSpec& spec) {
  double f = 1.0;
  for (const auto& bt : spec.biases) f *= 1.0 - bt.p_guiding;
  return f;
}

void to_json(nlohmann::json& j, const BiasGenSpec& s) {
  nlohmann::json biases = nlohmann::json::array();
  for (const auto& bt : s.biases)
    biases.push_back({{"name", bt.name}, {"alphabet", bt.alphabet}, {"p_guiding", bt.p_guiding}, {"guiding", bt.guiding}});
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : s.train_cells) cells.push_back({{"target", c.target}, {"pattern", c.pattern}, {"count", c.count}});
  const auto& f = s.features;
  j = {{"name", s.name},
       {"num_classes", s.num_classes},
       {"biases", biases},
       {"features",
        {{"kind", feature_kind_name(f.kind)},
         {"signal_dim", f.signal_dim},
         {"signal_scale", f.signal_scale},
         {"signal_noise", f.signal_noise},
         {"bias_dim", f.bias_dim},
         {"bias_scale", f.bias_scale},
         {"bias_noise", f.bias_noise},
         {"patch_size", f.patch_size},
         {"channels", f.channels}}},
       {"train_counts", s.train_counts},
       {"train_cells", cells},
       {"eval_per_cell", s.eval_per_cell},
       {"val_mode", s.val_mode == ValidationMode::kBalanced ? "balanced" : "in_distribution"},
       {"require_guiding_majority", s.require_guiding_majority},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, BiasGenSpec& s) {
  s.name = j.value("name", s.name);
  s.num_classes = j.value("num_classes", s.num_classes);
  if (j.contains("biases")) {
    s.biases.clear();
    for (const auto& b : j.at("biases")) {
      BiasType bt;
      bt.name = b.value("name", "");
      bt.alphabet = b.at("alphabet").get<std::size_t>();
      bt.p_guiding = b.at("p_guiding").get<double>();
      if (b.contains("guiding")) {
        bt.guiding = b.at("guiding").get<std::vector<int>>();
      } else {
        for (std::size_t t = 0; t < s.num_classes; ++t) bt.guiding.push_back(static_cast<int>(t % bt.alphabet));
      }
      s.biases.push_back(std::move(bt));
    }
  }
  if (j.contains("features")) {
    const auto& f = j.at("features");
    auto& fm = s.features;
    if (f.contains("kind")) {
      const auto k = f.at("kind").get<std::string>();
      if (k == "linear")
        fm.kind = FeatureKind::kLinear;
      else if (k == "patch")
        fm.kind = FeatureKind::kPatch;
      else
        throw ContractViolation("unknown feature kind '" + k + "'");
    }
    fm.signal_dim = f.value("signal_dim", fm.signal_dim);
    fm.signal_scale = f.value("signal_scale", fm.signal_scale);
    fm.signal_noise = f.value("signal_noise", fm.signal_noise);
    fm.bias_dim = f.value("bias_dim", fm.bias_dim);
    fm.bias_scale = f.value("bias_scale", fm.bias_scale);
    fm.bias_noise = f.value("bias_noise", fm.bias_noise);
    fm.patch_size = f.value("patch_size", fm.patch_size);
    fm.channels = f.value("channels", fm.channels);
  }
  if (j.contains("train_counts")) s.train_counts = j.at("train_counts").get<std::vector<std::size_t>>();
  if (j.contains("train_cells")) {
    s.train_cells.clear();
    for (const auto& c : j.at("train_cells"))
      s.train_cells.push_back({c.at("target").get<int>(), c.at("pattern").get<std::string>(), c.at("count").get<std::size_t>()});
  }
  s.eval_per_cell = j.value("eval_per_cell", s.eval_per_cell);
  if (j.contains("val_mode")) {
    const auto m = j.at("val_mode").get<std::string>();
    if (m == "balanced")
      s.val_mode = ValidationMode::kBalanced;
    else if (m == "in_distribution")
      s.val_mode = ValidationMode::kInDistribution;
    else
      throw ContractViolation("unknown val_mode '" + m + "'");
  }
  s.require_guiding_majority = j.value("require_guiding_majority", s.require_guiding_majority);
  s.seed = j.value("seed", s.seed);
}

std::vector<std::string> preset_names() {
  return {"mcmnist-like", "multiceleba-like", "multiceleba3-like", "multiceleba-exact", "unbiased"};
}

BiasGenSpec preset(const std::string& name, std::uint64_t seed) {
  BiasGenSpec s;
  s.name = name;
  s.seed = seed;
  auto identity_guides = [](std::size_t classes) {
    std::vector<int> g(classes);
    for (std::size_t t = 0; t < classes; ++t) g[t] = static_cast<int>(t);
    return g;
  };

  if (name == "mcmnist-like") {
    // Ten digit-like classes, left/right border colors guiding at 99% / 95%.
    s.num_classes = 10;
    s.biases = {{"left-color", 10, 0.99, identity_guides(10)}, {"right-color", 10, 0.95, identity_guides(10)}};
    s.features.kind = FeatureKind::kPatch;
    s.features.patch_size = 6;
    s.features.channels = 3;
    s.features.signal_scale = 1.0;
    s.features.signal_noise = 1.1;
    s.features.bias_scale = 1.0;
    s.features.bias_noise = 0.1;
    s.train_counts.assign(10, 2000);
    s.eval_per_cell = 20;
    return s;
  }
  if (name == "multiceleba-like" || name == "multiceleba3-like" || name == "multiceleba-exact") {
    // Binary target, gender/age (and mouth-open) guiding at 95.3%. Class 0 is
    // the majority class, mirroring the high-cheekbones split.
    const bool three = name == "multiceleba3-like";
    s.num_classes = 2;
    s.biases = {{"gender", 2, 0.953, {0, 1}}, {"age", 2, 0.953, {0, 1}}};
    if (three) s.biases.push_back({"mouth-open", 2, 0.953, {0, 1}});
    s.features.kind = FeatureKind::kLinear;
    s.features.signal_dim = 8;
    s.features.signal_scale = 0.8;
    s.features.signal_noise = 1.0;
    s.features.bias_dim = 4;
    s.features.bias_scale = 1.0;
    s.features.bias_noise = 1.0;
    if (name == "multiceleba-exact") {
      s.train_cells = {{0, "GG", 44582}, {1, "GG", 16220}, {0, "GC", 2200}, {1, "GC", 800},
                       {0, "CG", 2200},  {1, "CG", 800},   {0, "CC", 110},  {1, "CC", 40}};
    } else {
      // Class totals of the two-bias training configuration.
      s.train_counts = {49092, 17860};
    }
    s.eval_per_cell = 100;
    return s;
  }
  if (name == "unbiased") {
    s.num_classes = 2;
    s.biases = {{"a", 2, 0.5, {0, 1}}, {"b", 2, 0.5, {0, 1}}};
    s.features.kind = FeatureKind::kLinear;
    s.features.signal_scale = 0.6;
    s.features.signal_noise = 1.0;
    s.features.bias_noise = 0.3;
    s.train_counts = {1000, 1000};
    s.eval_per_cell = 100;
    s.require_guiding_majority = false;
    return s;
  }
  throw ContractViolation("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------

void Split::push(std::span<const double> xi, int ti, std::span<const int> bi) {
  if (xi.size() != feature_dim || bi.size() != num_biases) throw ContractViolation("Split::push: dimension mismatch");
  x.insert(x.end(), xi.begin(), xi.end());
  t.push_back(ti);
  b.insert(b.end(), bi.begin(), bi.end());
}

ad::Tensor Split::gather(std::span<const std::size_t> indices) const {
  std::vector<double> out;
  out.reserve(indices.size() * feature_dim);
  for (auto i : indices) {
    if (i >= size()) throw ContractViolation("Split::gather: index out of range");
    auto f = features(i);
    out.insert(out.end(), f.begin(), f.end());
  }
  return ad::Tensor::matrix(indices.size(), feature_dim, std::move(out));
}

std::vector<int> Split::gather_targets(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(t.at(i));
  return out;
}

ad::Tensor Split::all_features() const { return ad::Tensor::matrix(size(), feature_dim, x); }

std::vector<std::size_t> Dataset::alphabets() const {
  std::vector<std::size_t> a;
  for (const auto& bt : spec.biases) a.push_back(bt.alphabet);
  return a;
}

Dataset generate(const BiasGenSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  const Prototypes proto = make_prototypes(spec);

  Rng train_rng(derive_seed(spec.seed, "train"));
  ds.train = empty_split(spec);
  if (!spec.train_cells.empty()) {
    for (const auto& cell : spec.train_cells) {
      const auto bits = pattern_bits(cell.pattern);
      for (std::size_t i = 0; i < cell.count; ++i) emit(spec, proto, cell.target, bits, train_rng, ds.train);
    }
  } else {
    for (std::size_t t = 0; t < spec.num_classes; ++t)
      for (std::size_t i = 0; i < spec.train_counts[t]; ++i)
        emit_in_distribution(spec, proto, static_cast<int>(t), train_rng, ds.train);
  }
  if (spec.require_guiding_majority) check_guiding_majority(spec, ds.train);

  Rng val_rng(derive_seed(spec.seed, "val"));
  if (spec.val_mode == ValidationMode::kBalanced) {
    ds.val = balanced_split(spec, proto, val_rng);
  } else {
    ds.val = empty_split(spec);
    const std::size_t per_class = spec.eval_per_cell << spec.num_biases();
    for (std::size_t t = 0; t < spec.num_classes; ++t)
      for (std::size_t i = 0; i < per_class; ++i) emit_in_distribution(spec, proto, static_cast<int>(t), val_rng, ds.val);
  }
  Rng test_rng(derive_seed(spec.seed, "test"));
  ds.test = balanced_split(spec, proto, test_rng);
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write dataset " + path.string());
  nlohmann::json header = {{"num_classes", ds.num_classes()},
                           {"num_biases", ds.num_biases()},
                           {"alphabets", ds.alphabets()},
                           {"feature_dim", ds.spec.feature_dim()},
                           {"sizes", {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}}},
                           {"spec", ds.spec}};
  os << kDatasetMagic << '\n' << header.dump() << '\n';
  auto write_split = [&](const char* tag, const Split& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      os << tag << ' ' << s.t[i];
      for (std::size_t d = 0; d < s.num_biases; ++d) os << ' ' << s.bias(i, d);
      for (double v : s.features(i)) {
        os << ' ';
        write_double(os, v);
      }
      os << '\n';
    }
  };
  write_split("train", ds.train);
  write_split("val", ds.val);
  write_split("test", ds.test);
  if (!os) throw IoError("failed writing dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kDatasetMagic) throw IoError(path.string() + " is not an mbias dataset");
  if (!std::getline(is, line)) throw IoError(path.string() + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  Dataset ds;
  ds.spec = header.at("spec").get<BiasGenSpec>();
  ds.train = empty_split(ds.spec);
  ds.val = empty_split(ds.spec);
  ds.test = empty_split(ds.spec);
  const std::size_t D = ds.spec.num_biases(), F = ds.spec.feature_dim();
  if (header.at("feature_dim").get<std::size_t>() != F || header.at("num_biases").get<std::size_t>() != D)
    throw IoError(path.string() + ": header dimensions disagree with embedded spec");

  std::vector<double> x(F);
  std::vector<int> b(D);
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, tok;
    int t = 0;
    if (!(ls >> tag >> t)) throw IoError(path.string() + ":" + std::to_string(lineno) + ": truncated record");
    for (std::size_t d = 0; d < D; ++d)
      if (!(ls >> b[d])) throw IoError(path.string() + ":" + std::to_string(lineno) + ": truncated record");
    for (std::size_t k = 0; k < F; ++k) {
      if (!(ls >> tok)) throw IoError(path.string() + ":" + std::to_string(lineno) + ": truncated record");
      x[k] = parse_double(tok);
    }
    Split* target = tag == "train" ? &ds.train : tag == "val" ? &ds.val : tag == "test" ? &ds.test : nullptr;
    if (!target) throw IoError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + tag + "'");
    target->push(x, t, b);
  }
  const auto& sizes = header.at("sizes");
  if (sizes.at("train").get<std::size_t>() != ds.train.size() || sizes.at("val").get<std::size_t>() != ds.val.size() ||
      sizes.at("test").get<std::size_t>() != ds.test.size())
    throw IoError(path.string() + ": record counts disagree with header");
  return ds;
}

// ---------------------------------------------------------------------------

MajorityTable compute_majority(const Split& train, std::size_t num_classes, const std::vector<std::size_t>& alphabets,
                               const std::vector<std::size_t>& bias_dims, TieBreak tie) {
  if (train.size() == 0) throw ContractViolation("compute_majority: empty training split");
  MajorityTable table;
  table.bias_dims = bias_dims;
  for (std::size_t d : bias_dims) {
    if (d >= train.num_biases) throw ContractViolation("compute_majority: bias dim out of range");
    std::vector<std::vector<std::size_t>> counts(num_classes, std::vector<std::size_t>(alphabets.at(d), 0));
    for (std::size_t i = 0; i < train.size(); ++i)
      ++counts[static_cast<std::size_t>(train.t[i])][static_cast<std::size_t>(train.bias(i, d))];
    std::vector<int> maj(num_classes, 0);
    for (std::size_t t = 0; t < num_classes; ++t) {
      const auto& c = counts[t];
      const auto best = static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin());
      if (tie == TieBreak::kError && c[best] > 0 && std::count(c.begin(), c.end(), c[best]) > 1) {
        throw MajorityTieError("majority attribute of bias type " + std::to_string(d) + " in class " +
                               std::to_string(t) + " is tied at count " + std::to_string(c[best]));
      }
      maj[t] = static_cast<int>(best);
    }
    table.majority.push_back(std::move(maj));
  }
  return table;
}

std::size_t group_id(std::span<const int> g) {
  std::size_t id = 0;
  for (int bit : g) id = (id << 1) | (bit ? 1u : 0u);
  return id;
}

std::vector<int> group_bits(std::size_t id, std::size_t num_biases) {
  std::vector<int> g(num_biases);
  for (std::size_t d = 0; d < num_biases; ++d) g[d] = static_cast<int>((id >> (num_biases - 1 - d)) & 1u);
  return g;
}

std::vector<std::size_t> GroupIndex::nonempty_groups() const {
  std::vector<std::size_t> ids;
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (!groups[g].empty()) ids.push_back(g);
  return ids;
}

GroupIndex assign_groups(const Split& split, const MajorityTable& table, std::size_t num_classes) {
  if (split.size() == 0) throw ContractViolation("assign_groups: empty split");
  const std::size_t D = table.num_biases();
  GroupIndex idx;
  idx.num_biases = D;
  idx.num_classes = num_classes;
  idx.groups.assign(std::size_t{1} << D, {});
  idx.by_class.assign(std::size_t{1} << D, std::vector<std::vector<std::size_t>>(num_classes));
  idx.group_of.resize(split.size());
  std::vector<int> g(D);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto t = static_cast<std::size_t>(split.t[i]);
    if (t >= num_classes) throw ContractViolation("assign_groups: target out of range");
    for (std::size_t k = 0; k < D; ++k) g[k] = split.bias(i, table.bias_dims[k]) == table.majority[k][t] ? 1 : 0;
    const auto id = group_id(g);
    idx.groups[id].push_back(i);
    idx.by_class[id][t].push_back(i);
    idx.group_of[i] = id;
  }
  return idx;
}

const Split& split_of(const Dataset& ds, SplitKind kind) {
  switch (kind) {
    case SplitKind::kTrain: return ds.train;
    case SplitKind::kVal: return ds.val;
    case SplitKind::kTest: return ds.test;
  }
  return ds.train;
}

GroupIndex assign_groups(const Dataset& ds, SplitKind kind, std::vector<std::size_t> bias_dims, TieBreak tie) {
  if (bias_dims.empty())
    for (std::size_t d = 0; d < ds.num_biases(); ++d) bias_dims.push_back(d);
  const auto table = compute_majority(ds.train, ds.num_classes(), ds.alphabets(), bias_dims, tie);
  return assign_groups(split_of(ds, kind), table, ds.num_classes());
}

std::vector<double> group_proportions(const GroupIndex& train_index) {
  std::vector<double> w(train_index.num_groups(), 0.0);
  const double m = static_cast<double>(train_index.total());
  for (std::size_t g = 0; g < w.size(); ++g) w[g] = static_cast<double>(train_index.groups[g].size()) / m;
  return w;
}

// ---------------------------------------------------------------------------

GroupBalancedSampler::GroupBalancedSampler(std::vector<std::vector<std::size_t>> partitions, std::size_t batch_size,
                                           std::uint64_t seed, std::uint64_t epoch) {
  for (std::size_t i = 0; i < partitions.size(); ++i) {
    if (partitions[i].empty()) continue;
    Part p;
    p.members = std::move(partitions[i]);
    p.seed = derive_seed(derive_seed(seed, epoch), i);
    parts_.push_back(std::move(p));
    ids_.push_back(i);
  }
  if (parts_.empty()) throw ContractViolation("group-balanced sampling needs at least one non-empty group");
  const std::size_t n = parts_.size();
  if (batch_size == 0 || batch_size % n != 0) {
    const std::size_t lo = std::max(n, batch_size / n * n);
    const std::size_t hi = (batch_size / n + 1) * n;
    const std::size_t nearest = batch_size - lo <= hi - batch_size && lo > 0 ? lo : hi;
    throw ContractViolation("batch size " + std::to_string(batch_size) + " is not divisible by the " +
                            std::to_string(n) + " non-empty groups; nearest valid batch size is " +
                            std::to_string(nearest));
  }
  quota_ = batch_size / n;
  for (auto& p : parts_) reshuffle(p);
}

GroupBalancedSampler::GroupBalancedSampler(const GroupIndex& index, std::size_t batch_size, std::uint64_t seed,
                                           std::uint64_t epoch)
    : GroupBalancedSampler(index.groups, batch_size, seed, epoch) {}

void GroupBalancedSampler::reshuffle(Part& p) {
  Rng rng(derive_seed(p.seed, p.round++));
  p.order = p.members;
  rng.shuffle(p.order.begin(), p.order.end());
  p.cursor = 0;
}

std::vector<std::vector<std::size_t>> GroupBalancedSampler::next() {
  std::vector<std::vector<std::size_t>> out(parts_.size());
  for (std::size_t k = 0; k < parts_.size(); ++k) {
    Part& p = parts_[k];
    auto& batch = out[k];
    batch.reserve(quota_);
    if (p.members.size() < quota_) {
      Rng rng(derive_seed(p.seed, p.round++));
      for (std::size_t i = 0; i < quota_; ++i) batch.push_back(p.members[rng.below(p.members.size())]);
      continue;
    }
    for (std::size_t i = 0; i < quota_; ++i) {
      if (p.cursor == p.order.size()) reshuffle(p);
      batch.push_back(p.order[p.cursor++]);
    }
  }
  return out;
}

ShuffledSampler::ShuffledSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch)
    : batch_size_(batch_size), seed_(derive_seed(derive_seed(seed, "shuffled"), epoch)) {
  if (n == 0 || batch_size == 0) throw ContractViolation("ShuffledSampler: empty population or zero batch size");
  order_.resize(n);
  for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  Rng rng(derive_seed(seed_, round_++));
  rng.shuffle(order_.begin(), order_.end());
}

std::vector<std::size_t> ShuffledSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  for (std::size_t i = 0; i < batch_size_; ++i) {
    if (cursor_ == order_.size()) {
      Rng rng(derive_seed(seed_, round_++));
      rng.shuffle(order_.begin(), order_.end());
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

}  // namespace mbias
