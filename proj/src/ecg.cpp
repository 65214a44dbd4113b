// SPDX-License-Identifier: Apache-2.0
#include "ecglab/ecg.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ecglab {

namespace {

constexpr double kTraceLevel = 0.0;        // black
constexpr double kMinorGridLevel = 215.0;  // light gray, every 8 px
constexpr double kMajorGridLevel = 175.0;  // darker, every 32 px
constexpr double kClampMv = 5.0;

double gauss(double t, double amp, double center, double width) {
  const double d = t - center;
  return amp * std::exp(-(d * d) / (2.0 * width * width));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct BeatShape {
  double amp = 1.0;
  double qrs = 1.0;
  double st = 0.0;
  double t_scale = 1.0;

  double value(double t) const {
    double v = 0.0;
    v += gauss(t, 0.12 * amp, -0.17, 0.022);                  // P
    v += gauss(t, -0.08 * amp, -0.030 * qrs, 0.009 * qrs);    // Q
    v += gauss(t, 1.10 * amp, 0.0, 0.011 * qrs);              // R
    v += gauss(t, -0.22 * amp, 0.028 * qrs, 0.010 * qrs);     // S
    v += gauss(t, 0.30 * amp * t_scale, 0.24, 0.045);         // T
    // ST plateau between QRS end and T onset.
    const double rise = 0.06 * qrs;
    const double fall = 0.18 + 0.02 * (qrs - 1.0);
    v += st * (logistic((t - rise) / 0.008) - logistic((t - fall) / 0.012));
    return v;
  }
};

double lead_gain(int lead) {
  static const double kGains[] = {1.0, 0.9, 1.1, 0.8};
  return kGains[lead % 4];
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

ClassCatalog ClassCatalog::desk_default() {
  ClassCatalog c;
  c.classes = {
      {"NORMAL", "normal sinus rhythm", 72.0, 1.0, 1.0, 0.0, 1.0, 0.04, true},
      {"ST_ELEVATION", "ST elevation", 78.0, 1.0, 1.0, 0.30, 1.0, 0.04, false},
      {"WIDE_QRS", "wide QRS", 65.0, 1.0, 2.0, 0.0, 1.0, 0.04, false},
      {"IRREGULAR_RR", "irregular rhythm", 82.0, 1.0, 1.0, 0.0, 1.0, 0.35, false},
      {"LOW_VOLTAGE", "low voltage", 70.0, 0.45, 1.0, 0.0, 1.0, 0.04, false},
      {"TALL_T", "tall T waves", 75.0, 1.0, 1.0, 0.0, 2.5, 0.04, false},
  };
  return c;
}

int ClassCatalog::index_of(const std::string& id) const {
  for (int i = 0; i < size(); ++i) {
    if (classes[static_cast<std::size_t>(i)].id == id) return i;
  }
  return -1;
}

void ClassCatalog::validate() const {
  if (classes.empty()) throw ConfigError("catalog: no classes");
  for (int i = 0; i < size(); ++i) {
    for (int j = i + 1; j < size(); ++j) {
      if (at(i).id == at(j).id || at(i).display == at(j).display) {
        throw ConfigError("catalog: duplicate class " + at(i).id);
      }
    }
  }
}

void DataConfig::validate() const {
  if (leads < 1 || sample_rate_hz <= 0 || image_size < 16 || layout_rows < 1 ||
      layout_cols < 1 || mv_per_px <= 0 || ms_per_px <= 0) {
    throw ConfigError("data: extents must be positive");
  }
  if (n_train < 1 || n_test < 1) throw ConfigError("data: split sizes must be >= 1");
  if (multi_label_rate < 0.0 || multi_label_rate > 1.0) {
    throw ConfigError("data: multi_label_rate outside [0,1]");
  }
  if (multi_label_min < 2 || multi_label_max < multi_label_min) {
    throw ConfigError("data: multi-label span must satisfy 2 <= min <= max");
  }
  if (image_size % layout_rows != 0 || image_size % layout_cols != 0) {
    throw ConfigError("data: layout must tile the image exactly");
  }
}

EcgSignal synth_signal(const std::vector<std::string>& class_ids, const DataConfig& cfg,
                       const ClassCatalog& catalog, std::uint64_t seed) {
  if (class_ids.empty()) throw ValidationError("synth: class set is empty");
  std::vector<const EcgClassSpec*> specs;
  for (const std::string& id : class_ids) {
    const int idx = catalog.index_of(id);
    if (idx < 0) throw ValidationError("synth: unknown class " + id);
    specs.push_back(&catalog.at(idx));
  }
  if (class_ids.size() > 1) {
    for (const EcgClassSpec* s : specs) {
      if (s->exclusive) {
        throw ValidationError("synth: " + s->id + " cannot combine with other classes");
      }
    }
  }

  BeatShape shape;
  double hr = 0.0, jitter = 0.0;
  for (const EcgClassSpec* s : specs) {
    shape.amp *= s->amp_scale;
    shape.qrs *= s->qrs_width;
    shape.st += s->st_offset_mv;
    shape.t_scale *= s->t_scale;
    hr += s->hr_bpm;
    jitter = std::max(jitter, s->rr_jitter);
  }
  hr /= static_cast<double>(specs.size());

  Rng rng(seed);
  hr *= 1.0 + 0.08 * (2.0 * rng.uniform() - 1.0);

  EcgSignal sig;
  sig.leads = cfg.leads;
  sig.samples_per_lead = cfg.samples_per_lead();
  sig.sample_rate_hz = cfg.sample_rate_hz;
  sig.class_ids = class_ids;
  sig.values.assign(static_cast<std::size_t>(sig.leads) * sig.samples_per_lead, 0.0);

  const double duration = sig.samples_per_lead / cfg.sample_rate_hz;
  std::vector<double> beats;
  double t = 0.15 + 0.25 * rng.uniform();
  while (t < duration + 0.4) {
    beats.push_back(t);
    const double rr = (60.0 / hr) * (1.0 + jitter * (2.0 * rng.uniform() - 1.0));
    t += std::max(rr, 0.3);
  }

  for (int lead = 0; lead < sig.leads; ++lead) {
    const double gain = lead_gain(lead);
    const double wander_phase = 2.0 * M_PI * rng.uniform();
    for (int i = 0; i < sig.samples_per_lead; ++i) {
      const double ts = i / cfg.sample_rate_hz;
      double v = 0.035 * std::sin(2.0 * M_PI * 0.3 * ts + wander_phase);
      for (double bt : beats) {
        const double dt = ts - bt;
        if (dt < -0.45 || dt > 0.6) continue;
        v += shape.value(dt);
      }
      v += rng.normal(0.0, 0.015);
      v *= gain;
      sig.values[static_cast<std::size_t>(lead) * sig.samples_per_lead + i] =
          std::clamp(v, -kClampMv, kClampMv);
    }
  }
  return sig;
}

Raster render_image(const EcgSignal& signal, const DataConfig& cfg) {
  if (cfg.layout_rows * cfg.layout_cols < signal.leads) {
    throw LayoutError("render: layout " + std::to_string(cfg.layout_rows) + "x" +
                      std::to_string(cfg.layout_cols) + " cannot place " +
                      std::to_string(signal.leads) + " leads");
  }
  if (cfg.cell_width() < 8 || cfg.cell_height() < 8) {
    throw LayoutError("render: image too small for layout cells");
  }

  Raster img = Raster::blank(cfg.image_size, cfg.image_size);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (x % 32 == 0 || y % 32 == 0) {
        img.set(x, y, static_cast<std::uint8_t>(kMajorGridLevel));
      } else if (x % 8 == 0 || y % 8 == 0) {
        img.set(x, y, static_cast<std::uint8_t>(kMinorGridLevel));
      }
    }
  }

  const double px_per_mv = 1.0 / cfg.mv_per_px;
  const double samples_per_px = cfg.ms_per_px * signal.sample_rate_hz / 1000.0;
  for (int lead = 0; lead < signal.leads; ++lead) {
    const int row = lead / cfg.layout_cols;
    const int col = lead % cfg.layout_cols;
    const int x0 = col * cfg.cell_width();
    const int y0 = row * cfg.cell_height();
    const int mid = y0 + cfg.cell_height() / 2;
    int prev_y = mid;
    for (int x = 0; x < cfg.cell_width(); ++x) {
      const int sample = std::min(static_cast<int>(x * samples_per_px),
                                  signal.samples_per_lead - 1);
      const double v = signal.at(lead, sample);
      int y = mid - static_cast<int>(std::lround(v * px_per_mv));
      y = std::clamp(y, y0, y0 + cfg.cell_height() - 1);
      const int lo = std::min(x == 0 ? y : prev_y, y);
      const int hi = std::max(x == 0 ? y : prev_y, y);
      for (int yy = lo; yy <= hi; ++yy) {
        img.set(x0 + x, yy, static_cast<std::uint8_t>(kTraceLevel));
      }
      prev_y = y;
    }
  }
  return img;
}

namespace {

void validate_steps(const std::vector<AugmentStep>& steps) {
  for (const AugmentStep& s : steps) {
    switch (s.kind) {
      case AugmentStep::Kind::crease:
        if (s.count < 0 || s.darkness < 0.0 || s.darkness > 1.0) {
          throw ValidationError("augment: crease darkness outside [0,1]");
        }
        break;
      case AugmentStep::Kind::gaussian_noise:
        if (s.sigma < 0.0) throw ValidationError("augment: negative noise sigma");
        break;
      case AugmentStep::Kind::salt_pepper:
        if (s.fraction < 0.0 || s.fraction > 1.0) {
          throw ValidationError("augment: salt-pepper fraction outside [0,1]");
        }
        break;
      case AugmentStep::Kind::rotate:
        if (s.degrees < -5.0 || s.degrees > 5.0) {
          throw ValidationError("augment: rotation outside [-5,5] degrees");
        }
        break;
    }
  }
}

void apply_crease(Raster& img, int count, double darkness, Rng& rng) {
  for (int c = 0; c < count; ++c) {
    // Edge-to-edge quasi-linear band.
    const bool vertical = rng.uniform() < 0.5;
    double x0, y0, x1, y1;
    if (vertical) {
      x0 = rng.uniform() * img.width;
      x1 = rng.uniform() * img.width;
      y0 = 0.0;
      y1 = img.height - 1.0;
    } else {
      y0 = rng.uniform() * img.height;
      y1 = rng.uniform() * img.height;
      x0 = 0.0;
      x1 = img.width - 1.0;
    }
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const double t = std::clamp(((x - x0) * dx + (y - y0) * dy) / len2, 0.0, 1.0);
        const double px = x0 + t * dx, py = y0 + t * dy;
        const double dist = std::hypot(x - px, y - py);
        if (dist < 1.8) {
          const double fade = 1.0 - darkness * (1.0 - dist / 1.8);
          img.set(x, y, static_cast<std::uint8_t>(std::lround(img.at(x, y) * fade)));
        }
      }
    }
  }
}

void apply_gaussian_noise(Raster& img, double sigma, Rng& rng) {
  for (auto& p : img.pixels) {
    const double v = p + rng.normal(0.0, sigma);
    p = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
}

void apply_salt_pepper(Raster& img, double fraction, Rng& rng) {
  const std::size_t total = img.pixels.size();
  const std::size_t flips =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
  std::vector<std::uint32_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < flips; ++i) {
    const std::size_t j = i + rng.next_u64() % (total - i);
    std::swap(order[i], order[j]);
    img.pixels[order[i]] = rng.uniform() < 0.5 ? 0 : 255;
  }
}

void apply_rotate(Raster& img, double degrees, Rng&) {
  const double rad = degrees * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  Raster out = Raster::blank(img.width, img.height, 255);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // Inverse-map the output pixel and sample bilinearly, white fill.
      const double sx = cs * (x - cx) + sn * (y - cy) + cx;
      const double sy = -sn * (x - cx) + cs * (y - cy) + cy;
      const int ix = static_cast<int>(std::floor(sx));
      const int iy = static_cast<int>(std::floor(sy));
      const double fx = sx - ix, fy = sy - iy;
      double acc = 0.0;
      for (int oy = 0; oy < 2; ++oy) {
        for (int ox = 0; ox < 2; ++ox) {
          const double w = (ox == 0 ? 1.0 - fx : fx) * (oy == 0 ? 1.0 - fy : fy);
          const int px = ix + ox, py = iy + oy;
          const double v = (px >= 0 && px < img.width && py >= 0 && py < img.height)
                               ? img.at(px, py)
                               : 255.0;
          acc += w * v;
        }
      }
      out.set(x, y, static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L)));
    }
  }
  img = out;
}

}  // namespace

Raster augment(const Raster& image, const std::vector<AugmentStep>& steps,
               std::uint64_t seed) {
  validate_steps(steps);
  Raster img = image;
  Rng rng(seed);
  for (const AugmentStep& s : steps) {
    switch (s.kind) {
      case AugmentStep::Kind::crease:
        apply_crease(img, s.count, s.darkness, rng);
        break;
      case AugmentStep::Kind::gaussian_noise:
        apply_gaussian_noise(img, s.sigma, rng);
        break;
      case AugmentStep::Kind::salt_pepper:
        apply_salt_pepper(img, s.fraction, rng);
        break;
      case AugmentStep::Kind::rotate:
        apply_rotate(img, s.degrees, rng);
        break;
    }
  }
  return img;
}

void write_signal_csv(const EcgSignal& signal, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "lead,rate_hz,v0,v1,...\n";
  for (int lead = 0; lead < signal.leads; ++lead) {
    out << lead << ',' << signal.sample_rate_hz;
    for (int i = 0; i < signal.samples_per_lead; ++i) {
      out << ',' << signal.at(lead, i);
    }
    out << '\n';
  }
}

std::vector<std::string> question_templates() {
  return {
      "What abnormalities are present in this ECG?",
      "Describe the abnormalities in this ECG.",
      "Which cardiac findings does this ECG show?",
  };
}

std::string answer_for(const std::vector<int>& labels, const ClassCatalog& catalog) {
  std::vector<std::string> names;
  for (int i = 0; i < catalog.size(); ++i) {
    if (i < static_cast<int>(labels.size()) && labels[static_cast<std::size_t>(i)] != 0) {
      names.push_back(catalog.at(i).display);
    }
  }
  if (names.empty()) throw ValidationError("answer: no positive labels");
  std::string joined = names[0];
  for (std::size_t i = 1; i + 1 < names.size(); ++i) joined += ", " + names[i];
  if (names.size() > 1) joined += " and " + names.back();
  return "The ECG shows " + joined + ".";
}

namespace {

json sample_to_json(const InstructionSample& s) {
  json j;
  j["image"] = s.image;
  j["question"] = s.question;
  j["answer"] = s.answer;
  j["labels"] = s.labels;
  j["seed"] = s.seed;
  return j;
}

// Deterministic label plan for one split: single-label slots round-robin
// over the catalog, multi-label slots drawn from the non-exclusive classes.
std::vector<std::vector<int>> plan_labels(int n, const DataConfig& cfg,
                                          const ClassCatalog& catalog, Rng& rng,
                                          const char* split_name) {
  const int n_classes = catalog.size();
  if (n < n_classes) {
    throw StratificationError(std::string("dataset: ") + split_name + " split of " +
                              std::to_string(n) + " cannot cover " +
                              std::to_string(n_classes) + " classes");
  }
  std::vector<int> combinable;
  for (int i = 0; i < n_classes; ++i) {
    if (!catalog.at(i).exclusive) combinable.push_back(i);
  }
  const int n_multi =
      combinable.size() >= 2
          ? static_cast<int>(std::llround(cfg.multi_label_rate * n))
          : 0;
  const int n_single = n - n_multi;

  std::vector<std::vector<int>> plans;
  for (int i = 0; i < n_single; ++i) {
    std::vector<int> bits(static_cast<std::size_t>(n_classes), 0);
    bits[static_cast<std::size_t>(i % n_classes)] = 1;
    plans.push_back(bits);
  }
  for (int i = 0; i < n_multi; ++i) {
    const int k = std::min(rng.uniform_int(cfg.multi_label_min, cfg.multi_label_max),
                           static_cast<int>(combinable.size()));
    std::vector<int> pool = combinable;
    rng.shuffle(pool);
    std::vector<int> bits(static_cast<std::size_t>(n_classes), 0);
    for (int j = 0; j < k; ++j) bits[static_cast<std::size_t>(pool[static_cast<std::size_t>(j)])] = 1;
    plans.push_back(bits);
  }
  rng.shuffle(plans);

  std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
  for (const auto& bits : plans) {
    for (int i = 0; i < n_classes; ++i) counts[static_cast<std::size_t>(i)] += bits[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < n_classes; ++i) {
    if (counts[static_cast<std::size_t>(i)] == 0) {
      throw StratificationError(std::string("dataset: class ") + catalog.at(i).id +
                                " absent from the " + split_name + " split");
    }
  }
  return plans;
}

}  // namespace

void write_manifest(const std::vector<InstructionSample>& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const InstructionSample& s : samples) {
    out << sample_to_json(s).dump() << '\n';
  }
}

std::vector<InstructionSample> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::vector<InstructionSample> samples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    InstructionSample s;
    s.image = j.at("image").get<std::string>();
    s.question = j.at("question").get<std::string>();
    s.answer = j.at("answer").get<std::string>();
    s.labels = j.at("labels").get<std::vector<int>>();
    s.seed = j.at("seed").get<std::uint64_t>();
    samples.push_back(std::move(s));
  }
  return samples;
}

DatasetManifests build_dataset(const DataConfig& cfg, const ClassCatalog& catalog,
                               const std::string& out_dir, std::uint64_t seed) {
  cfg.validate();
  catalog.validate();
  fs::create_directories(fs::path(out_dir) / "images");

  DatasetManifests result;
  const std::vector<std::string> questions = question_templates();

  for (const bool is_train : {true, false}) {
    const char* split = is_train ? "train" : "test";
    const int n = is_train ? cfg.n_train : cfg.n_test;
    Rng plan_rng(mix_seed(seed, is_train ? 1 : 2));
    std::vector<std::vector<int>> plans = plan_labels(n, cfg, catalog, plan_rng, split);

    std::vector<InstructionSample> samples;
    std::map<std::string, int>& counts = is_train ? result.train_counts : result.test_counts;
    for (int i = 0; i < catalog.size(); ++i) counts[catalog.at(i).id] = 0;

    for (int i = 0; i < n; ++i) {
      const std::vector<int>& bits = plans[static_cast<std::size_t>(i)];
      std::vector<std::string> ids;
      for (int c = 0; c < catalog.size(); ++c) {
        if (bits[static_cast<std::size_t>(c)]) {
          ids.push_back(catalog.at(c).id);
          counts[catalog.at(c).id] += 1;
        }
      }
      const std::uint64_t sample_seed = mix_seed(seed, (is_train ? 100000 : 200000) + i);
      EcgSignal sig = synth_signal(ids, cfg, catalog, sample_seed);
      Raster img = render_image(sig, cfg);
      if (!cfg.augment.empty()) {
        img = augment(img, cfg.augment, mix_seed(sample_seed, 7));
      }

      char name[64];
      std::snprintf(name, sizeof(name), "images/%s_%05d.pgm", split, i);
      write_pgm(img, (fs::path(out_dir) / name).string());
      if (cfg.export_signals) {
        fs::create_directories(fs::path(out_dir) / "signals");
        char csv[64];
        std::snprintf(csv, sizeof(csv), "signals/%s_%05d.csv", split, i);
        write_signal_csv(sig, (fs::path(out_dir) / csv).string());
      }

      InstructionSample s;
      s.image = name;
      Rng q_rng(mix_seed(sample_seed, 13));
      s.question = questions[q_rng.next_u64() % questions.size()];
      s.answer = answer_for(bits, catalog);
      s.labels = bits;
      s.seed = sample_seed;
      samples.push_back(std::move(s));
    }

    const std::string manifest = (fs::path(out_dir) / (std::string(split) + ".jsonl")).string();
    write_manifest(samples, manifest);
    (is_train ? result.train_path : result.test_path) = manifest;
  }
  return result;
}

}  // namespace ecglab
