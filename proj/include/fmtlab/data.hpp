// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multimodal datasets: in-memory representation, the on-disk directory
// format, left padding, synthetic probe tasks, and seeded splits.
//
// Directory layout:
//   meta.json        modalities (name, dim), seq_len, num_samples, label_kind, d_y
//   X_<name>.f64     N × T_store × d_M, sample i's real steps in rows [0, len_i)
//   y.f64            N × label_width
//   lengths.u32      N true sequence lengths
// Every binary file starts with a 16-byte header: "FMTD", u32 version,
// u32 rank, u32 reserved (0); then rank × u64 dims; then the payload.
// In memory, sequences are left-padded to seq_len and masked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmtlab/binary_io.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/tensor.hpp"

namespace fmtlab {

enum class LabelKind { regression, binary, categorical };

inline std::string to_string(LabelKind k) {
  switch (k) {
    case LabelKind::regression: return "regression";
    case LabelKind::binary: return "binary";
    case LabelKind::categorical: return "categorical";
  }
  return "?";
}

inline LabelKind parse_label_kind(const std::string& s) {
  if (s == "regression") return LabelKind::regression;
  if (s == "binary") return LabelKind::binary;
  if (s == "categorical") return LabelKind::categorical;
  throw DataError("unknown label_kind '" + s + "'");
}

struct ModalityInfo {
  std::string name;
  std::size_t dim = 0;
};

struct MultimodalBatch {
  std::vector<Tensor> inputs;       // per modality, [B × T × d_M]
  std::vector<std::uint8_t> mask;   // [B × T], 1 = real timestep
  Tensor labels;                    // [B × label_width]

  std::size_t batch_size() const { return labels.dim(0); }
  std::size_t seq_len() const { return inputs.empty() ? 0 : inputs[0].dim(1); }
};

struct Dataset {
  std::vector<ModalityInfo> modalities;
  std::size_t seq_len = 0;
  LabelKind label_kind = LabelKind::regression;
  std::size_t d_y = 1;          // model output width (= classes when categorical)
  std::size_t num_classes = 0;  // categorical only
  std::vector<std::uint32_t> lengths;
  MultimodalBatch data;

  std::size_t size() const { return lengths.size(); }
  std::size_t label_width() const { return label_kind == LabelKind::regression ? d_y : 1; }

  std::vector<std::string> modality_names() const {
    std::vector<std::string> out;
    for (const auto& m : modalities) out.push_back(m.name);
    return out;
  }

  // Gathers samples into a batch, in the given order.
  MultimodalBatch batch(std::span<const std::size_t> indices) const {
    MultimodalBatch b;
    const std::size_t n = indices.size();
    const std::size_t T = seq_len;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      const std::size_t d = modalities[m].dim;
      std::vector<double> buf(n * T * d);
      auto src = data.inputs[m].data();
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(src.data() + indices[i] * T * d, T * d, buf.data() + i * T * d);
      b.inputs.emplace_back(Shape{n, T, d}, std::move(buf));
    }
    b.mask.resize(n * T);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(data.mask.data() + indices[i] * T, T, b.mask.data() + i * T);
    const std::size_t w = label_width();
    std::vector<double> lab(n * w);
    auto ls = data.labels.data();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(ls.data() + indices[i] * w, w, lab.data() + i * w);
    b.labels = Tensor({n, w}, std::move(lab));
    return b;
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw DataError("empty dataset subset");
    Dataset d;
    d.modalities = modalities;
    d.seq_len = seq_len;
    d.label_kind = label_kind;
    d.d_y = d_y;
    d.num_classes = num_classes;
    for (auto i : indices) d.lengths.push_back(lengths.at(i));
    d.data = batch(indices);
    return d;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
};

// Builds left-padded tensors from per-sample sequences. `sequences[m][i]` holds
// len_i × d_M values in time order.
inline Dataset assemble_dataset(std::vector<ModalityInfo> modalities, std::size_t seq_len,
                                const std::vector<std::vector<std::vector<double>>>& sequences,
                                const std::vector<std::uint32_t>& lengths,
                                std::vector<double> labels, LabelKind kind, std::size_t d_y,
                                std::size_t num_classes = 0) {
  Dataset ds;
  ds.modalities = std::move(modalities);
  ds.seq_len = seq_len;
  ds.label_kind = kind;
  ds.d_y = d_y;
  ds.num_classes = num_classes;
  ds.lengths = lengths;
  const std::size_t n = lengths.size();
  const std::size_t T = seq_len;
  if (n == 0) throw DataError("dataset has no samples");
  for (std::size_t i = 0; i < n; ++i) {
    if (lengths[i] == 0) throw DataError("sample " + std::to_string(i) + " has zero length");
    if (lengths[i] > T) {
      throw DataError("sample " + std::to_string(i) + " has length " +
                      std::to_string(lengths[i]) + " > declared seq_len " + std::to_string(T));
    }
  }
  for (std::size_t m = 0; m < ds.modalities.size(); ++m) {
    const std::size_t d = ds.modalities[m].dim;
    std::vector<double> buf(n * T * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& seq = sequences[m][i];
      if (seq.size() != lengths[i] * d) {
        throw DataError("modality " + ds.modalities[m].name + ": sample " + std::to_string(i) +
                        " has " + std::to_string(seq.size()) + " values, expected " +
                        std::to_string(lengths[i] * d));
      }
      const std::size_t pad = T - lengths[i];
      std::copy(seq.begin(), seq.end(), buf.begin() + static_cast<std::ptrdiff_t>((i * T + pad) * d));
    }
    ds.data.inputs.emplace_back(Shape{n, T, d}, std::move(buf));
  }
  ds.data.mask.assign(n * T, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = T - lengths[i]; t < T; ++t) ds.data.mask[i * T + t] = 1;
  const std::size_t w = ds.label_width();
  if (labels.size() != n * w) {
    throw DataError("labels: got " + std::to_string(labels.size()) + " values, expected " +
                    std::to_string(n * w));
  }
  ds.data.labels = Tensor({n, w}, std::move(labels));
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace detail {

inline constexpr char kDataMagic[4] = {'F', 'M', 'T', 'D'};
inline constexpr std::uint32_t kDataVersion = 1;

inline void write_header(std::ostream& os, const std::vector<std::uint64_t>& dims) {
  os.write(kDataMagic, 4);
  io::write_pod<std::uint32_t>(os, kDataVersion);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  io::write_pod<std::uint32_t>(os, 0);
  for (auto d : dims) io::write_pod<std::uint64_t>(os, d);
}

inline std::vector<std::uint64_t> read_header(std::istream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || !std::equal(magic, magic + 4, kDataMagic)) throw DataError(path + ": bad magic");
  auto version = io::read_pod<std::uint32_t>(is, path);
  if (version != kDataVersion) {
    throw DataError(path + ": unsupported version " + std::to_string(version));
  }
  auto rank = io::read_pod<std::uint32_t>(is, path);
  io::read_pod<std::uint32_t>(is, path);
  if (rank == 0 || rank > 8) throw DataError(path + ": bad rank " + std::to_string(rank));
  std::vector<std::uint64_t> dims(rank);
  for (auto& d : dims) d = io::read_pod<std::uint64_t>(is, path);
  return dims;
}

inline std::string dims_str(const std::vector<std::uint64_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t n = ds.size();
  const std::size_t T = ds.seq_len;

  nlohmann::ordered_json meta;
  meta["format"] = "fmtlab-dataset";
  meta["version"] = detail::kDataVersion;
  meta["modalities"] = nlohmann::ordered_json::array();
  for (const auto& m : ds.modalities) meta["modalities"].push_back({{"name", m.name}, {"dim", m.dim}});
  meta["seq_len"] = T;
  meta["num_samples"] = n;
  meta["label_kind"] = to_string(ds.label_kind);
  meta["d_y"] = ds.d_y;
  meta["num_classes"] = ds.num_classes;
  io::write_file((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");

  for (std::size_t m = 0; m < ds.modalities.size(); ++m) {
    const std::size_t d = ds.modalities[m].dim;
    auto path = (fs::path(dir) / ("X_" + ds.modalities[m].name + ".f64")).string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    detail::write_header(out, {n, T, d});
    // Real steps first, then zeros.
    std::vector<double> packed(n * T * d, 0.0);
    auto src = ds.data.inputs[m].data();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t pad = T - ds.lengths[i];
      std::copy_n(src.data() + (i * T + pad) * d, ds.lengths[i] * d, packed.data() + i * T * d);
    }
    io::write_array(out, packed);
  }

  {
    auto path = (fs::path(dir) / "y.f64").string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    detail::write_header(out, {n, ds.label_width()});
    io::write_array(out, ds.data.labels.values());
  }
  {
    auto path = (fs::path(dir) / "lengths.u32").string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    detail::write_header(out, {n});
    io::write_array(out, ds.lengths);
  }
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto meta_path = (fs::path(dir) / "meta.json").string();
  if (!fs::exists(meta_path)) throw DataError("dataset directory " + dir + " has no meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file(meta_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path + ": " + e.what());
  }
  auto req = [&](const char* key) -> const nlohmann::json& {
    if (!meta.contains(key)) throw DataError(meta_path + ": missing field '" + key + "'");
    return meta[key];
  };

  std::vector<ModalityInfo> modalities;
  for (const auto& m : req("modalities")) {
    modalities.push_back({m.at("name").get<std::string>(), m.at("dim").get<std::size_t>()});
  }
  if (modalities.empty()) throw DataError(meta_path + ": no modalities");
  const auto T = req("seq_len").get<std::size_t>();
  const auto n = req("num_samples").get<std::size_t>();
  const auto kind = parse_label_kind(req("label_kind").get<std::string>());
  const auto d_y = req("d_y").get<std::size_t>();
  const auto num_classes = meta.value("num_classes", std::size_t{0});

  std::vector<std::uint32_t> lengths;
  {
    auto path = (fs::path(dir) / "lengths.u32").string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing lengths file " + path);
    auto dims = detail::read_header(in, path);
    if (dims.size() != 1 || dims[0] != n) {
      throw DataError(path + ": dims " + detail::dims_str(dims) + " do not match num_samples " +
                      std::to_string(n));
    }
    lengths = io::read_array<std::uint32_t>(in, n, path);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (lengths[i] > T) {
      throw DataError("sample " + std::to_string(i) + " has length " + std::to_string(lengths[i]) +
                      ", longer than declared seq_len " + std::to_string(T));
    }
  }

  std::vector<std::vector<std::vector<double>>> sequences(modalities.size());
  for (std::size_t m = 0; m < modalities.size(); ++m) {
    const auto& mod = modalities[m];
    auto path = (fs::path(dir) / ("X_" + mod.name + ".f64")).string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("modality " + mod.name + ": missing file " + path);
    auto dims = detail::read_header(in, path);
    if (dims.size() != 3 || dims[0] != n) {
      throw DataError("modality " + mod.name + ": file dims " + detail::dims_str(dims) +
                      " do not match num_samples " + std::to_string(n));
    }
    if (dims[2] != mod.dim) {
      throw DataError("modality " + mod.name + ": metadata declares dim " +
                      std::to_string(mod.dim) + " but file rows have " + std::to_string(dims[2]));
    }
    const std::size_t t_store = dims[1];
    auto raw = io::read_array<double>(in, n * t_store * mod.dim, path);
    sequences[m].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (lengths[i] > t_store) {
        throw DataError("modality " + mod.name + ": sample " + std::to_string(i) +
                        " length exceeds stored steps");
      }
      auto begin = raw.begin() + static_cast<std::ptrdiff_t>(i * t_store * mod.dim);
      sequences[m][i].assign(begin, begin + static_cast<std::ptrdiff_t>(lengths[i] * mod.dim));
    }
  }

  const std::size_t label_width = kind == LabelKind::regression ? d_y : 1;
  std::vector<double> labels;
  {
    auto path = (fs::path(dir) / "y.f64").string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing label file " + path);
    auto dims = detail::read_header(in, path);
    if (dims.size() != 2 || dims[0] != n || dims[1] != label_width) {
      throw DataError(path + ": dims " + detail::dims_str(dims) + " do not match metadata");
    }
    labels = io::read_array<double>(in, n * label_width, path);
  }
  return assemble_dataset(std::move(modalities), T, sequences, lengths, std::move(labels), kind,
                          d_y, num_classes);
}

// Content hash of a dataset directory's files (meta + payloads). Run
// manifests stored alongside are not part of the dataset.
inline std::string dataset_hash(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto name = e.path().filename().string();
    if (name.rfind("manifest", 0) != 0) files.push_back(name);
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& f : files) {
    h = io::fnv1a(f, h);
    h = io::fnv1a(io::read_file((fs::path(dir) / f).string()), h);
  }
  return io::hex64(h);
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class SyntheticTask { unimodal_sum, bimodal_product, trimodal_parity };

inline SyntheticTask parse_task(const std::string& s) {
  if (s == "unimodal-sum") return SyntheticTask::unimodal_sum;
  if (s == "bimodal-product") return SyntheticTask::bimodal_product;
  if (s == "trimodal-parity") return SyntheticTask::trimodal_parity;
  throw ConfigError("unknown task '" + s +
                    "' (expected unimodal-sum, bimodal-product or trimodal-parity)");
}

inline std::string to_string(SyntheticTask t) {
  switch (t) {
    case SyntheticTask::unimodal_sum: return "unimodal-sum";
    case SyntheticTask::bimodal_product: return "bimodal-product";
    case SyntheticTask::trimodal_parity: return "trimodal-parity";
  }
  return "?";
}

struct SyntheticTaskSpec {
  SyntheticTask task = SyntheticTask::unimodal_sum;
  std::size_t num_samples = 1000;
  std::size_t seq_len = 20;
  std::vector<std::size_t> dims{4, 4, 4};
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  bool regression = false;  // label = signed value instead of its sign
};

inline std::vector<std::string> default_modality_names(std::size_t m) {
  static const char* base[] = {"L", "V", "A"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(i < 3 ? base[i] : "M" + std::to_string(i));
  return out;
}

// 1 iff the clean designated-channel values sum to a positive number.
inline double unimodal_sum_label(std::span<const double> clean) {
  double s = 0.0;
  for (double v : clean) s += v;
  return s > 0.0 ? 1.0 : 0.0;
}

// Count of negative signs mod 2 (so all-positive is 0).
inline double sign_parity_label(std::span<const int> signs) {
  int minus = 0;
  for (int s : signs) minus += s < 0 ? 1 : 0;
  return static_cast<double>(minus % 2);
}

inline Dataset generate_synthetic(const SyntheticTaskSpec& spec) {
  const std::size_t needed = spec.task == SyntheticTask::unimodal_sum     ? 1
                             : spec.task == SyntheticTask::bimodal_product ? 2
                                                                          : 3;
  if (spec.dims.size() < needed) {
    throw ConfigError(to_string(spec.task) + " needs at least " + std::to_string(needed) +
                      " modalities");
  }
  if (spec.num_samples == 0 || spec.seq_len == 0) throw ConfigError("empty synthetic dataset");
  if (spec.noise_std < 0.0) throw ConfigError("noise_std must be nonnegative");
  for (auto d : spec.dims)
    if (d == 0) throw ConfigError("modality dims must be positive");

  const std::size_t M = spec.dims.size();
  const std::size_t T = spec.seq_len;
  const auto names = default_modality_names(M);
  std::vector<ModalityInfo> modalities;
  for (std::size_t m = 0; m < M; ++m) modalities.push_back({names[m], spec.dims[m]});

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> len_dist((T + 1) / 2, T);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  std::vector<std::vector<std::vector<double>>> seqs(M, std::vector<std::vector<double>>(spec.num_samples));
  std::vector<std::uint32_t> lengths(spec.num_samples);
  std::vector<double> labels(spec.num_samples);

  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    const std::size_t len = len_dist(rng);
    lengths[i] = static_cast<std::uint32_t>(len);
    for (std::size_t m = 0; m < M; ++m) {
      auto& s = seqs[m][i];
      s.assign(len * spec.dims[m], 0.0);
      if (spec.noise_std > 0.0)
        for (auto& v : s) v = spec.noise_std * unit(rng);
    }
    std::uniform_int_distribution<std::size_t> pos_dist(0, len - 1);
    switch (spec.task) {
      case SyntheticTask::unimodal_sum: {
        std::vector<double> clean(len);
        for (std::size_t t = 0; t < len; ++t) {
          clean[t] = unit(rng);
          seqs[0][i][t * spec.dims[0]] += clean[t];
        }
        if (spec.regression) {
          double total = std::accumulate(clean.begin(), clean.end(), 0.0);
          labels[i] = total / std::sqrt(static_cast<double>(len));
        } else {
          labels[i] = unimodal_sum_label(clean);
        }
        break;
      }
      case SyntheticTask::bimodal_product:
      case SyntheticTask::trimodal_parity: {
        std::vector<int> signs(needed);
        for (std::size_t m = 0; m < needed; ++m) {
          signs[m] = coin(rng) ? 1 : -1;
          const std::size_t t = pos_dist(rng);
          seqs[m][i][t * spec.dims[m]] += static_cast<double>(signs[m]);
        }
        if (spec.regression) {
          double prod = 1.0;
          for (int s : signs) prod *= s;
          labels[i] = prod;
        } else {
          labels[i] = sign_parity_label(signs);
        }
        break;
      }
    }
  }
  return assemble_dataset(std::move(modalities), T, seqs, lengths, std::move(labels),
                          spec.regression ? LabelKind::regression : LabelKind::binary, 1);
}

// ---------------------------------------------------------------------------
// Splits

struct DatasetSplit {
  Dataset train;
  Dataset validation;
  Dataset test;
};

// Seeded permutation split. Sizes are round(r_train·N), round(r_val·N), rest.
inline std::vector<std::vector<std::size_t>> split_indices(std::size_t n,
                                                          const std::vector<double>& ratios,
                                                          std::uint64_t seed) {
  if (ratios.size() != 3) throw ConfigError("split needs three ratios (train, validation, test)");
  double total = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split ratios must be nonnegative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - std::min(n, n_train),
                              static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
  std::vector<std::vector<std::size_t>> out(3);
  out[0].assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, n_train)));
  out[1].assign(perm.begin() + static_cast<std::ptrdiff_t>(out[0].size()),
                perm.begin() + static_cast<std::ptrdiff_t>(out[0].size() + n_val));
  out[2].assign(perm.begin() + static_cast<std::ptrdiff_t>(out[0].size() + n_val), perm.end());
  return out;
}

inline DatasetSplit split(const Dataset& ds, const std::vector<double>& ratios, std::uint64_t seed) {
  auto parts = split_indices(ds.size(), ratios, seed);
  for (std::size_t i = 0; i < 3; ++i) {
    if (parts[i].empty()) {
      static const char* names[] = {"train", "validation", "test"};
      throw DataError(std::string("split produced an empty ") + names[i] + " set");
    }
  }
  return {ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2])};
}

}  // namespace fmtlab
