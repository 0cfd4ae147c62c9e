#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ncgnn/error.hpp"
#include "ncgnn/graph.hpp"
#include "ncgnn/model.hpp"
#include "ncgnn/rng.hpp"
#include "ncgnn/sparse.hpp"
#include "ncgnn/train.hpp"

namespace ncgnn {

using nlohmann::json;

// ---- sparse matrix text format ---------------------------------------------
// Header "n_rows n_cols nnz", then one "row col value" triplet per line with
// rows ascending. Lossless for doubles (17 significant digits).

inline void export_sparse(const SparseMatrix& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("export_sparse: cannot open " + path.string());
    out << m.n_rows << ' ' << m.n_cols << ' ' << m.nnz() << '\n';
    out << std::setprecision(17);
    for (std::size_t i = 0; i < m.n_rows; ++i)
        for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p)
            out << i << ' ' << m.col_indices[p] << ' ' << m.values[p] << '\n';
    if (!out) throw IoError("export_sparse: write failed for " + path.string());
}

inline SparseMatrix import_sparse(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("import_sparse: cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw IoError("import_sparse: missing header", 1);
    ++line_no;
    std::istringstream header(line);
    std::size_t n_rows = 0, n_cols = 0, nnz = 0;
    if (!(header >> n_rows >> n_cols >> nnz))
        throw IoError("import_sparse: malformed header '" + line + "'", line_no);
    std::vector<Triplet> triplets;
    triplets.reserve(nnz);
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        Triplet t{};
        if (!(row >> t.row >> t.col >> t.value))
            throw IoError("import_sparse: malformed triplet '" + line + "'", line_no);
        triplets.push_back(t);
    }
    if (triplets.size() != nnz)
        throw IoError("import_sparse: header promised " + std::to_string(nnz) +
                      " entries, file holds " + std::to_string(triplets.size()));
    return from_triplets(n_rows, n_cols, std::move(triplets));
}

// ---- dataset manifest and loaders -------------------------------------------

enum class FeatureKind { DenseCsv, SparseTriplet };

struct DatasetManifest {
    std::string name;
    std::filesystem::path edges;
    std::filesystem::path features;
    std::filesystem::path labels;
    std::size_t n_nodes = 0;
    std::size_t n_features = 0;
    std::size_t n_classes = 0;
    FeatureKind feature_kind = FeatureKind::DenseCsv;
};

inline DatasetManifest manifest_from_json(const json& j, const std::filesystem::path& base_dir) {
    DatasetManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.edges = base_dir / j.at("edges").get<std::string>();
        m.features = base_dir / j.at("features").get<std::string>();
        m.labels = base_dir / j.at("labels").get<std::string>();
        m.n_nodes = j.at("n_nodes").get<std::size_t>();
        m.n_features = j.at("n_features").get<std::size_t>();
        m.n_classes = j.at("n_classes").get<std::size_t>();
        const std::string kind = j.at("feature_kind").get<std::string>();
        if (kind == "dense-csv")
            m.feature_kind = FeatureKind::DenseCsv;
        else if (kind == "sparse-triplet")
            m.feature_kind = FeatureKind::SparseTriplet;
        else
            throw ValidationError("manifest: unknown feature_kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw IoError(std::string("manifest: ") + e.what());
    }
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_manifest: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("load_manifest: invalid JSON in " + path.string() + ": " + e.what());
    }
    return manifest_from_json(j, path.parent_path());
}

// Resolves a --dataset argument: a manifest file path, a dataset directory,
// or a bare dataset name under $NCGNN_DATA_ROOT.
inline std::filesystem::path resolve_dataset_path(const std::string& arg) {
    namespace fs = std::filesystem;
    fs::path p(arg);
    if (fs::is_regular_file(p)) return p;
    if (fs::is_directory(p) && fs::is_regular_file(p / "manifest.json"))
        return p / "manifest.json";
    if (const char* root = std::getenv("NCGNN_DATA_ROOT")) {
        const fs::path candidate = fs::path(root) / arg / "manifest.json";
        if (fs::is_regular_file(candidate)) return candidate;
    }
    throw IoError("dataset not found: '" + arg +
                  "' (tried as file, directory, and under NCGNN_DATA_ROOT)");
}

struct LoadStats {
    std::size_t merged_duplicate_edges = 0;
    std::size_t removed_self_loops = 0;
};

namespace detail {

inline std::vector<std::pair<std::size_t, std::size_t>> read_edge_list(
    const std::filesystem::path& path, std::size_t n_nodes, LoadStats* stats) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open edge list " + path.string());
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        long long u = 0, v = 0;
        if (!(row >> u >> v))
            throw IoError("load_dataset: malformed edge '" + line + "'", line_no);
        if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n_nodes ||
            static_cast<std::size_t>(v) >= n_nodes)
            throw ValidationError("load_dataset: dangling edge endpoint (" + std::to_string(u) +
                                  ", " + std::to_string(v) + ") at line " +
                                  std::to_string(line_no));
        if (u == v) {
            if (stats) ++stats->removed_self_loops;
            continue;
        }
        const auto a = static_cast<std::size_t>(std::min(u, v));
        const auto b = static_cast<std::size_t>(std::max(u, v));
        edges.emplace_back(a, b);
    }
    std::sort(edges.begin(), edges.end());
    std::vector<std::pair<std::size_t, std::size_t>> unique;
    unique.reserve(edges.size());
    for (const auto& e : edges) {
        if (!unique.empty() && unique.back() == e) {
            if (stats) ++stats->merged_duplicate_edges;
            continue;
        }
        unique.push_back(e);
    }
    return unique;
}

inline Tensor read_dense_csv(const std::filesystem::path& path, std::size_t n_nodes,
                             std::size_t n_features) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open features " + path.string());
    Tensor x({n_nodes, n_features});
    std::string line;
    std::size_t row = 0, line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (row >= n_nodes)
            throw ValidationError("load_dataset: feature row count exceeds manifest n_nodes");
        std::istringstream cells(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(cells, cell, ',')) {
            if (col >= n_features)
                throw ValidationError("load_dataset: feature column count exceeds manifest at line " +
                                      std::to_string(line_no));
            try {
                x.at(row, col) = std::stod(cell);
            } catch (const std::exception&) {
                throw IoError("load_dataset: bad feature value '" + cell + "'", line_no);
            }
            ++col;
        }
        if (col != n_features)
            throw ValidationError("load_dataset: feature column count mismatch at line " +
                                  std::to_string(line_no));
        ++row;
    }
    if (row != n_nodes)
        throw ValidationError("load_dataset: feature row count mismatch (" + std::to_string(row) +
                              " vs manifest " + std::to_string(n_nodes) + ")");
    return x;
}

inline Tensor read_sparse_features(const std::filesystem::path& path, std::size_t n_nodes,
                                   std::size_t n_features) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open features " + path.string());
    Tensor x({n_nodes, n_features});
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        std::size_t node = 0, feat = 0;
        double value = 0.0;
        if (!(row >> node >> feat >> value))
            throw IoError("load_dataset: malformed feature triplet '" + line + "'", line_no);
        if (node >= n_nodes || feat >= n_features)
            throw ValidationError("load_dataset: feature index out of range at line " +
                                  std::to_string(line_no));
        x.at(node, feat) = value;
    }
    return x;
}

inline std::vector<int> read_labels(const std::filesystem::path& path, std::size_t n_nodes,
                                    std::size_t n_classes) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open labels " + path.string());
    std::vector<int> labels;
    labels.reserve(n_nodes);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        int label = 0;
        try {
            label = std::stoi(line);
        } catch (const std::exception&) {
            throw IoError("load_dataset: bad label '" + line + "'", line_no);
        }
        if (label < 0 || static_cast<std::size_t>(label) >= n_classes)
            throw ValidationError("load_dataset: label out of range at line " +
                                  std::to_string(line_no));
        labels.push_back(label);
    }
    if (labels.size() != n_nodes)
        throw ValidationError("load_dataset: label count mismatch (" +
                              std::to_string(labels.size()) + " vs manifest " +
                              std::to_string(n_nodes) + ")");
    return labels;
}

}  // namespace detail

// Builds the dataset from disk: symmetric deduplicated adjacency (self-loops
// dropped), dense feature matrix, labels. Counts are validated against the
// manifest.
inline GraphDataset load_dataset(const DatasetManifest& manifest, LoadStats* stats = nullptr) {
    GraphDataset data;
    data.n_nodes = manifest.n_nodes;
    data.n_classes = manifest.n_classes;
    const auto edges = detail::read_edge_list(manifest.edges, manifest.n_nodes, stats);
    std::vector<Triplet> triplets;
    triplets.reserve(edges.size() * 2);
    for (const auto& [u, v] : edges) {
        triplets.push_back({u, v, 1.0});
        triplets.push_back({v, u, 1.0});
    }
    data.adjacency = from_triplets(manifest.n_nodes, manifest.n_nodes, std::move(triplets));
    data.features = manifest.feature_kind == FeatureKind::DenseCsv
                        ? detail::read_dense_csv(manifest.features, manifest.n_nodes,
                                                 manifest.n_features)
                        : detail::read_sparse_features(manifest.features, manifest.n_nodes,
                                                       manifest.n_features);
    data.labels = detail::read_labels(manifest.labels, manifest.n_nodes, manifest.n_classes);
    data.validate();
    return data;
}

// Optional row normalization of features (sums each row to 1); off by default
// since raw bag-of-words matrices are the baseline convention here.
inline void row_normalize_features(GraphDataset& data) {
    const std::size_t f = data.n_features();
    for (std::size_t i = 0; i < data.n_nodes; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < f; ++j) s += data.features.at(i, j);
        if (s == 0.0) continue;
        for (std::size_t j = 0; j < f; ++j) data.features.at(i, j) /= s;
    }
}

// Writes a dataset in the on-disk layout load_dataset expects and returns the
// manifest path. Each undirected edge is listed once.
inline std::filesystem::path write_dataset(const GraphDataset& data,
                                           const std::filesystem::path& dir,
                                           const std::string& name) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "edges.txt");
        for (std::size_t i = 0; i < data.n_nodes; ++i)
            for (std::size_t p = data.adjacency.row_offsets[i];
                 p < data.adjacency.row_offsets[i + 1]; ++p) {
                const std::size_t j = data.adjacency.col_indices[p];
                if (j > i) out << i << ' ' << j << '\n';
            }
    }
    {
        std::ofstream out(dir / "features.csv");
        out << std::setprecision(17);
        const std::size_t f = data.n_features();
        for (std::size_t i = 0; i < data.n_nodes; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                if (j) out << ',';
                out << data.features.at(i, j);
            }
            out << '\n';
        }
    }
    {
        std::ofstream out(dir / "labels.txt");
        for (int label : data.labels) out << label << '\n';
    }
    json manifest = {
        {"name", name},
        {"edges", "edges.txt"},
        {"features", "features.csv"},
        {"labels", "labels.txt"},
        {"n_nodes", data.n_nodes},
        {"n_features", data.n_features()},
        {"n_classes", data.n_classes},
        {"feature_kind", "dense-csv"},
    };
    const fs::path manifest_path = dir / "manifest.json";
    std::ofstream out(manifest_path);
    out << manifest.dump(2) << '\n';
    if (!out) throw IoError("write_dataset: cannot write " + manifest_path.string());
    return manifest_path;
}

// ---- split generation --------------------------------------------------------

struct SplitSpec {
    std::size_t per_class_train = 20;
    std::size_t val_size = 500;
    std::uint64_t split_seed = 0;
};

// Uniform per-class training sample, then a uniform validation sample from
// the remainder; everything else is test. Deterministic in split_seed.
inline SplitMasks generate_split(const GraphDataset& data, const SplitSpec& spec) {
    if (spec.per_class_train * data.n_classes + spec.val_size > data.n_nodes)
        throw ValidationError("generate_split: split sizes exceed node count");
    Rng rng(spec.split_seed);
    SplitMasks masks;
    masks.train.assign(data.n_nodes, 0);
    masks.val.assign(data.n_nodes, 0);
    masks.test.assign(data.n_nodes, 0);

    for (std::size_t c = 0; c < data.n_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < data.n_nodes; ++i)
            if (static_cast<std::size_t>(data.labels[i]) == c) members.push_back(i);
        if (members.size() < spec.per_class_train)
            throw ValidationError("generate_split: class " + std::to_string(c) + " has only " +
                                  std::to_string(members.size()) + " nodes, need " +
                                  std::to_string(spec.per_class_train));
        for (std::size_t pick : rng.sample_without_replacement(members.size(),
                                                               spec.per_class_train))
            masks.train[members[pick]] = 1;
    }

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < data.n_nodes; ++i)
        if (!masks.train[i]) pool.push_back(i);
    for (std::size_t pick : rng.sample_without_replacement(pool.size(), spec.val_size))
        masks.val[pool[pick]] = 1;

    for (std::size_t i = 0; i < data.n_nodes; ++i)
        if (!masks.train[i] && !masks.val[i]) masks.test[i] = 1;
    return masks;
}

// ---- config (de)serialization -------------------------------------------------

inline json filter_spec_to_json(const FilterSpec& f) {
    json j = {
        {"mode", to_string(f.mode)},
        {"sparsify", f.rule.str()},
    };
    if (f.mode == FilterMode::Attention) {
        j["max_hop"] = f.max_hop;
        j["sparsify_final"] = f.sparsify_final;
    } else {
        j["alpha"] = f.alpha;
        if (f.truncation) j["truncate"] = *f.truncation;
    }
    return j;
}

inline FilterSpec filter_spec_from_json(const json& j) {
    FilterSpec f;
    if (j.contains("mode")) f.mode = filter_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("sparsify")) f.rule = SparsifyRule::parse(j.at("sparsify").get<std::string>());
    if (j.contains("max_hop")) f.max_hop = j.at("max_hop").get<std::size_t>();
    if (j.contains("sparsify_final")) f.sparsify_final = j.at("sparsify_final").get<bool>();
    if (j.contains("alpha")) f.alpha = j.at("alpha").get<double>();
    if (j.contains("truncate")) f.truncation = j.at("truncate").get<std::size_t>();
    return f;
}

inline json config_to_json(const TrainConfig& cfg) {
    return json{
        {"f_p", cfg.f_p},
        {"f_c", cfg.f_c},
        {"K", cfg.K},
        {"C", cfg.C},
        {"T", cfg.T},
        {"m_plus", cfg.m_plus},
        {"m_minus", cfg.m_minus},
        {"lambda", cfg.lambda},
        {"learning_rate", cfg.learning_rate},
        {"weight_decay", cfg.weight_decay},
        {"weight_decay_all", cfg.weight_decay_all},
        {"dropout_p", cfg.dropout_p},
        {"epochs", cfg.epochs},
        {"seed", cfg.seed},
        {"filter", filter_spec_to_json(cfg.filter)},
    };
}

inline TrainConfig config_from_json(const json& j, TrainConfig base = {}) {
    try {
        if (j.contains("f_p")) base.f_p = j.at("f_p").get<std::size_t>();
        if (j.contains("f_c")) base.f_c = j.at("f_c").get<std::size_t>();
        if (j.contains("K")) base.K = j.at("K").get<std::size_t>();
        if (j.contains("C")) base.C = j.at("C").get<std::size_t>();
        if (j.contains("T")) base.T = j.at("T").get<std::size_t>();
        if (j.contains("m_plus")) base.m_plus = j.at("m_plus").get<double>();
        if (j.contains("m_minus")) base.m_minus = j.at("m_minus").get<double>();
        if (j.contains("lambda")) base.lambda = j.at("lambda").get<double>();
        if (j.contains("learning_rate")) base.learning_rate = j.at("learning_rate").get<double>();
        if (j.contains("weight_decay")) base.weight_decay = j.at("weight_decay").get<double>();
        if (j.contains("weight_decay_all"))
            base.weight_decay_all = j.at("weight_decay_all").get<bool>();
        if (j.contains("dropout_p")) base.dropout_p = j.at("dropout_p").get<double>();
        if (j.contains("epochs")) base.epochs = j.at("epochs").get<std::size_t>();
        if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("filter")) base.filter = filter_spec_from_json(j.at("filter"));
    } catch (const json::exception& e) {
        throw IoError(std::string("config: ") + e.what());
    }
    return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("load_config: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("load_config: invalid JSON in " + path.string() + ": " + e.what());
    }
    return config_from_json(j, std::move(base));
}

// ---- checkpoints ----------------------------------------------------------------
// Binary layout (little endian):
//   magic "NCGNCKP1"
//   u32 tensor count
//   per tensor: u16 name length, name bytes, u8 rank, u64 dims..., f64 data...
//   u64 config length, config JSON bytes

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw IoError("checkpoint: unexpected end of file");
    return v;
}

inline void write_named_tensor(std::ofstream& out, const std::string& name, const Tensor& t) {
    write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

inline std::pair<std::string, Tensor> read_named_tensor(std::ifstream& in) {
    const auto name_len = read_pod<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = read_pod<std::uint8_t>(in);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw IoError("checkpoint: unexpected end of file");
    return {std::move(name), std::move(t)};
}

}  // namespace detail

inline constexpr char kCheckpointMagic[9] = "NCGNCKP1";

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                            const json& config_echo) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
    out.write(kCheckpointMagic, 8);
    std::uint32_t count = 0;
    params.for_each([&](const char*, const Tensor&, const Tensor&, bool) { ++count; });
    detail::write_pod<std::uint32_t>(out, count);
    params.for_each([&](const char* name, const Tensor& value, const Tensor&, bool) {
        detail::write_named_tensor(out, name, value);
    });
    const std::string cfg = config_echo.dump();
    detail::write_pod<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

inline std::pair<ModelParams, json> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("load_checkpoint: bad magic in " + path.string());
    const auto count = detail::read_pod<std::uint32_t>(in);
    ModelParams params;
    bool have_zeta = false;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, tensor] = detail::read_named_tensor(in);
        if (name == "primary_weights")
            params.primary_weights = std::move(tensor);
        else if (name == "primary_bias")
            params.primary_bias = std::move(tensor);
        else if (name == "routing_weights")
            params.routing_weights = std::move(tensor);
        else if (name == "class_bias")
            params.class_bias = std::move(tensor);
        else if (name == "zeta") {
            params.zeta = std::move(tensor);
            have_zeta = true;
        } else
            throw IoError("load_checkpoint: unknown tensor '" + name + "'");
    }
    if (!have_zeta) params.zeta = Tensor({0});
    const auto cfg_len = detail::read_pod<std::uint64_t>(in);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    if (!in) throw IoError("load_checkpoint: truncated config block");
    params.primary_weights_grad = Tensor(params.primary_weights.shape());
    params.primary_bias_grad = Tensor(params.primary_bias.shape());
    params.routing_weights_grad = Tensor(params.routing_weights.shape());
    params.class_bias_grad = Tensor(params.class_bias.shape());
    params.zeta_grad = Tensor(params.zeta.shape());
    json parsed;
    try {
        parsed = json::parse(cfg);
    } catch (const json::exception& e) {
        throw IoError(std::string("load_checkpoint: bad config JSON: ") + e.what());
    }
    return {std::move(params), std::move(parsed)};
}

// ---- per-epoch history ------------------------------------------------------------

inline void write_history(const std::filesystem::path& path,
                          const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("write_history: cannot open " + path.string());
    for (const EpochRecord& r : history) {
        const json j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_acc", r.val_acc}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write_history: write failed for " + path.string());
}

inline std::vector<EpochRecord> read_history(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("read_history: cannot open " + path.string());
    std::vector<EpochRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            EpochRecord r;
            r.epoch = j.at("epoch").get<std::size_t>();
            r.train_loss = j.at("train_loss").get<double>();
            r.val_acc = j.at("val_acc").get<double>();
            out.push_back(r);
        } catch (const json::exception& e) {
            throw IoError(std::string("read_history: ") + e.what(), line_no);
        }
    }
    return out;
}

}  // namespace ncgnn
