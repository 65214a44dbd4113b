// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "ecglab/raster.hpp"

namespace ecglab {

struct LayoutError : ValidationError { using ValidationError::ValidationError; };
struct StratificationError : ValidationError { using ValidationError::ValidationError; };

// Synthesis parameters for one catalog entry. Class effects compose across
// a multi-label set: amplitude and width factors multiply, the ST offset
// adds, the heart rate averages, the jitter takes the maximum.
struct EcgClassSpec {
  std::string id;       // catalog key, e.g. "ST_ELEVATION"
  std::string display;  // canonical name used in answers, e.g. "ST elevation"
  double hr_bpm = 72.0;
  double amp_scale = 1.0;
  double qrs_width = 1.0;     // QRS duration multiplier
  double st_offset_mv = 0.0;  // ST segment shift
  double t_scale = 1.0;       // T wave amplitude multiplier
  double rr_jitter = 0.04;    // fractional R-R variation
  bool exclusive = false;     // cannot combine with other classes (NORMAL)
};

struct ClassCatalog {
  std::vector<EcgClassSpec> classes;

  static ClassCatalog desk_default();
  int size() const { return static_cast<int>(classes.size()); }
  int index_of(const std::string& id) const;
  const EcgClassSpec& at(int i) const { return classes[static_cast<std::size_t>(i)]; }
  void validate() const;
};

struct EcgSignal {
  int leads = 0;
  int samples_per_lead = 0;
  double sample_rate_hz = 0.0;
  std::vector<double> values;  // lead-major, millivolts
  std::vector<std::string> class_ids;

  double at(int lead, int i) const {
    return values[static_cast<std::size_t>(lead) * samples_per_lead + i];
  }
};

struct AugmentStep {
  enum class Kind { crease, gaussian_noise, salt_pepper, rotate };
  Kind kind = Kind::gaussian_noise;
  // crease: count + darkness; gaussian: sigma (gray levels);
  // salt_pepper: fraction; rotate: degrees in [-5, 5].
  int count = 1;
  double darkness = 0.35;
  double sigma = 4.0;
  double fraction = 0.01;
  double degrees = 0.0;
};

struct DataConfig {
  int leads = 4;
  double sample_rate_hz = 250.0;
  int image_size = 96;
  int layout_rows = 4;
  int layout_cols = 1;
  double mv_per_px = 0.1;
  double ms_per_px = 40.0;
  int n_train = 512;
  int n_test = 128;
  double multi_label_rate = 0.2;
  int multi_label_min = 2;
  int multi_label_max = 3;
  bool export_signals = false;
  std::vector<AugmentStep> augment;

  void validate() const;
  int cell_width() const { return image_size / layout_cols; }
  int cell_height() const { return image_size / layout_rows; }
  double duration_s() const { return cell_width() * ms_per_px / 1000.0; }
  int samples_per_lead() const {
    return static_cast<int>(duration_s() * sample_rate_hz + 0.5);
  }
};

struct InstructionSample {
  std::string image;  // path relative to the manifest directory
  std::string question;
  std::string answer;
  std::vector<int> labels;  // one bit per catalog entry
  std::uint64_t seed = 0;
};

struct DatasetManifests {
  std::string train_path;
  std::string test_path;
  std::map<std::string, int> train_counts;
  std::map<std::string, int> test_counts;
};

// Deterministic seed derivation for per-sample streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Sum of parametric P-QRS-T beat templates at a class-dependent heart rate,
// deterministic per (classes, cfg, seed).
EcgSignal synth_signal(const std::vector<std::string>& class_ids, const DataConfig& cfg,
                       const ClassCatalog& catalog, std::uint64_t seed);

// Gridded grayscale chart, one trace per lead in its layout cell, fixed
// mV-per-pixel and ms-per-pixel scales. Pure function of its inputs.
Raster render_image(const EcgSignal& signal, const DataConfig& cfg);

Raster augment(const Raster& image, const std::vector<AugmentStep>& steps, std::uint64_t seed);

// "lead,rate_hz,v0,v1,..." header then one row per lead.
void write_signal_csv(const EcgSignal& signal, const std::string& path);

std::vector<std::string> question_templates();
std::string answer_for(const std::vector<int>& labels, const ClassCatalog& catalog);

DatasetManifests build_dataset(const DataConfig& cfg, const ClassCatalog& catalog,
                               const std::string& out_dir, std::uint64_t seed);

std::vector<InstructionSample> read_manifest(const std::string& path);
void write_manifest(const std::vector<InstructionSample>& samples, const std::string& path);

}  // namespace ecglab
