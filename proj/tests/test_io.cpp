#include "catch2/catch_amalgamated.hpp"

#include "ncgnn/eval.hpp"
#include "ncgnn/io.hpp"

#include "oracles.hpp"

#include <filesystem>
#include <fstream>
#include <random>

using namespace ncgnn;
namespace fs = std::filesystem;

#ifndef NCGNN_SOURCE_DIR
#define NCGNN_SOURCE_DIR "."
#endif

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("ncgnn_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

fs::path toy_manifest() { return fs::path(NCGNN_SOURCE_DIR) / "data" / "toy" / "manifest.json"; }

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("the shipped toy fixture loads to the expected dataset") {
    const DatasetManifest manifest = load_manifest(toy_manifest());
    LoadStats stats;
    const GraphDataset data = load_dataset(manifest, &stats);
    REQUIRE(data.n_nodes == 3);
    REQUIRE(data.n_classes == 2);
    REQUIRE(data.n_features() == 2);
    REQUIRE(data.labels == std::vector<int>{0, 1, 0});
    REQUIRE(data.adjacency.nnz() == 4);
    REQUIRE(data.adjacency.at(0, 1) == 1.0);
    REQUIRE(data.adjacency.at(1, 0) == 1.0);
    REQUIRE(data.adjacency.at(1, 2) == 1.0);
    REQUIRE_FALSE(data.adjacency.has_entry(0, 2));
    REQUIRE(data.features.at(0, 0) == 1.0);
    REQUIRE(data.features.at(1, 0) == 0.5);
    REQUIRE(data.features.at(2, 1) == 1.0);
    REQUIRE(stats.merged_duplicate_edges == 0);
    REQUIRE(stats.removed_self_loops == 0);
}

TEST_CASE("write_dataset followed by load_dataset is the identity on the toy fixture") {
    const GraphDataset data = load_dataset(load_manifest(toy_manifest()));
    TempDir tmp;
    const fs::path manifest_path = write_dataset(data, tmp.path / "copy", "toy-copy");
    const GraphDataset again = load_dataset(load_manifest(manifest_path));
    REQUIRE(again.n_nodes == data.n_nodes);
    REQUIRE(again.adjacency == data.adjacency);
    REQUIRE(again.labels == data.labels);
    REQUIRE(again.features.raw() == data.features.raw());
}

TEST_CASE("duplicate and reversed edges merge with a warning count") {
    TempDir tmp;
    write_file(tmp.path / "edges.txt", "0 1\n1 0\n0 1\n1 2\n2 2\n");
    write_file(tmp.path / "features.csv", "1,0\n0,1\n1,1\n");
    write_file(tmp.path / "labels.txt", "0\n1\n0\n");
    write_file(tmp.path / "manifest.json", R"({
        "name": "dups", "edges": "edges.txt", "features": "features.csv",
        "labels": "labels.txt", "n_nodes": 3, "n_features": 2, "n_classes": 2,
        "feature_kind": "dense-csv"})");
    LoadStats stats;
    const GraphDataset data = load_dataset(load_manifest(tmp.path / "manifest.json"), &stats);
    REQUIRE(stats.merged_duplicate_edges == 2);
    REQUIRE(stats.removed_self_loops == 1);
    REQUIRE(data.adjacency.nnz() == 4);
}

TEST_CASE("loader errors are distinct: dangling edges, bad labels, count mismatch") {
    TempDir tmp;
    write_file(tmp.path / "features.csv", "1,0\n0,1\n");
    write_file(tmp.path / "labels.txt", "0\n1\n");
    const std::string manifest = R"({
        "name": "bad", "edges": "edges.txt", "features": "features.csv",
        "labels": "labels.txt", "n_nodes": 2, "n_features": 2, "n_classes": 2,
        "feature_kind": "dense-csv"})";
    write_file(tmp.path / "manifest.json", manifest);

    write_file(tmp.path / "edges.txt", "0 7\n");
    REQUIRE_THROWS_WITH(load_dataset(load_manifest(tmp.path / "manifest.json")),
                        Catch::Matchers::ContainsSubstring("dangling edge"));

    write_file(tmp.path / "edges.txt", "0 1\n");
    write_file(tmp.path / "labels.txt", "0\n9\n");
    REQUIRE_THROWS_WITH(load_dataset(load_manifest(tmp.path / "manifest.json")),
                        Catch::Matchers::ContainsSubstring("label out of range"));

    write_file(tmp.path / "labels.txt", "0\n1\n0\n");
    REQUIRE_THROWS_WITH(load_dataset(load_manifest(tmp.path / "manifest.json")),
                        Catch::Matchers::ContainsSubstring("label count mismatch"));

    write_file(tmp.path / "labels.txt", "0\n1\n");
    write_file(tmp.path / "features.csv", "1,0\n");
    REQUIRE_THROWS_WITH(load_dataset(load_manifest(tmp.path / "manifest.json")),
                        Catch::Matchers::ContainsSubstring("feature row count mismatch"));
}

TEST_CASE("sparse triplet features populate a dense matrix") {
    TempDir tmp;
    write_file(tmp.path / "edges.txt", "0 1\n");
    write_file(tmp.path / "features.txt", "0 0 2.5\n1 3 -1.0\n");
    write_file(tmp.path / "labels.txt", "0\n1\n");
    write_file(tmp.path / "manifest.json", R"({
        "name": "sparse", "edges": "edges.txt", "features": "features.txt",
        "labels": "labels.txt", "n_nodes": 2, "n_features": 4, "n_classes": 2,
        "feature_kind": "sparse-triplet"})");
    const GraphDataset data = load_dataset(load_manifest(tmp.path / "manifest.json"));
    REQUIRE(data.features.at(0, 0) == 2.5);
    REQUIRE(data.features.at(1, 3) == -1.0);
    REQUIRE(data.features.at(0, 1) == 0.0);
}

TEST_CASE("split generation: toy arithmetic") {
    const GraphDataset data = load_dataset(load_manifest(toy_manifest()));
    SplitSpec spec;
    spec.per_class_train = 1;
    spec.val_size = 1;
    spec.split_seed = 7;
    const SplitMasks masks = generate_split(data, spec);
    REQUIRE(mask_count(masks.train) == 2);
    REQUIRE(mask_count(masks.val) == 1);
    REQUIRE(mask_count(masks.test) == 0);
    masks.validate(3);
}

TEST_CASE("split generation: deterministic, disjoint, uniform per class") {
    const GraphDataset data = make_sbm(40, 3, 0.1, 0.02, 4, 1.0, 5);
    SplitSpec spec;
    spec.per_class_train = 10;
    spec.val_size = 30;
    spec.split_seed = 11;
    const SplitMasks a = generate_split(data, spec);
    const SplitMasks b = generate_split(data, spec);
    REQUIRE(a.train == b.train);
    REQUIRE(a.val == b.val);
    REQUIRE(a.test == b.test);

    spec.split_seed = 12;
    const SplitMasks c = generate_split(data, spec);
    REQUIRE(a.train != c.train);

    a.validate(data.n_nodes);
    std::vector<std::size_t> histogram(3, 0);
    for (std::size_t i = 0; i < data.n_nodes; ++i)
        if (a.train[i]) ++histogram[static_cast<std::size_t>(data.labels[i])];
    for (std::size_t count : histogram) REQUIRE(count == 10);
    REQUIRE(mask_count(a.train) + mask_count(a.val) + mask_count(a.test) == data.n_nodes);
}

TEST_CASE("split generation rejects undersized classes") {
    const GraphDataset data = load_dataset(load_manifest(toy_manifest()));
    SplitSpec spec;
    spec.per_class_train = 2;  // class 1 has a single node
    spec.val_size = 0;
    REQUIRE_THROWS_WITH(generate_split(data, spec),
                        Catch::Matchers::ContainsSubstring("class 1"));
    spec.per_class_train = 1;
    spec.val_size = 500;
    REQUIRE_THROWS_AS(generate_split(data, spec), ValidationError);
}

TEST_CASE("sparse text format round-trips") {
    TempDir tmp;
    const SparseMatrix m = normalize_adjacency(oracle::random_adjacency(9, 0.35, 17));
    export_sparse(m, tmp.path / "m.smtx");
    const SparseMatrix back = import_sparse(tmp.path / "m.smtx");
    REQUIRE(back == m);

    SparseMatrix empty;
    empty.n_rows = empty.n_cols = 4;
    empty.row_offsets.assign(5, 0);
    export_sparse(empty, tmp.path / "empty.smtx");
    REQUIRE(import_sparse(tmp.path / "empty.smtx") == empty);
}

TEST_CASE("the two-node filter exports four entries of one half") {
    TempDir tmp;
    const SparseMatrix a_tilde =
        normalize_adjacency(from_triplets(2, 2, {{0, 1, 1.0}, {1, 0, 1.0}}));
    export_sparse(a_tilde, tmp.path / "two.smtx");
    std::ifstream in(tmp.path / "two.smtx");
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "2 2 4");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        REQUIRE(line.substr(line.size() - 3) == "0.5");
        ++rows;
    }
    REQUIRE(rows == 4);
}

TEST_CASE("malformed sparse files report the line number") {
    TempDir tmp;
    write_file(tmp.path / "bad.smtx", "2 2 2\n0 0 1.0\n0 bad 2.0\n");
    try {
        import_sparse(tmp.path / "bad.smtx");
        FAIL("expected a parse failure");
    } catch (const IoError& e) {
        REQUIRE(e.line == 3);
    }
}

TEST_CASE("checkpoints restore parameters and config exactly") {
    TempDir tmp;
    ModelDims dims{5, 4, 3, 2, 3, 2};
    Rng rng(23);
    const ModelParams params = init_params(dims, rng);
    TrainConfig cfg;
    cfg.K = 2;
    const json echo = config_to_json(cfg);
    save_checkpoint(tmp.path / "model.bin", params, echo);

    const auto [loaded, cfg_json] = load_checkpoint(tmp.path / "model.bin");
    REQUIRE(loaded.primary_weights.raw() == params.primary_weights.raw());
    REQUIRE(loaded.primary_bias.raw() == params.primary_bias.raw());
    REQUIRE(loaded.routing_weights.raw() == params.routing_weights.raw());
    REQUIRE(loaded.class_bias.raw() == params.class_bias.raw());
    REQUIRE(loaded.zeta.raw() == params.zeta.raw());
    REQUIRE(cfg_json == echo);

    // Same params, same bytes.
    save_checkpoint(tmp.path / "model2.bin", params, echo);
    REQUIRE(slurp(tmp.path / "model.bin") == slurp(tmp.path / "model2.bin"));
}

TEST_CASE("history serializes one record per line and reads back") {
    TempDir tmp;
    std::vector<EpochRecord> history = {{1, 0.9, 0.5}, {2, 0.7, 0.625}};
    write_history(tmp.path / "history.jsonl", history);
    const std::vector<EpochRecord> back = read_history(tmp.path / "history.jsonl");
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].epoch == 1);
    REQUIRE(back[0].train_loss == 0.9);
    REQUIRE(back[1].val_acc == 0.625);
}

TEST_CASE("train config survives a json round trip") {
    TrainConfig cfg;
    cfg.K = 6;
    cfg.f_p = 48;
    cfg.epochs = 77;
    cfg.filter.mode = FilterMode::Diffusion;
    cfg.filter.alpha = 0.05;
    cfg.filter.truncation = 9;
    cfg.filter.rule = SparsifyRule::eps(0.01);
    const TrainConfig back = config_from_json(config_to_json(cfg));
    REQUIRE(back.K == 6);
    REQUIRE(back.f_p == 48);
    REQUIRE(back.epochs == 77);
    REQUIRE(back.filter.mode == FilterMode::Diffusion);
    REQUIRE(back.filter.alpha == 0.05);
    REQUIRE(back.filter.truncation.value() == 9);
    REQUIRE(back.filter.rule.kind == SparsifyRule::Kind::Epsilon);
    REQUIRE(back.filter.rule.epsilon == 0.01);
}

TEST_CASE("manifest parsing rejects unknown feature kinds") {
    TempDir tmp;
    write_file(tmp.path / "manifest.json", R"({
        "name": "x", "edges": "e", "features": "f", "labels": "l",
        "n_nodes": 1, "n_features": 1, "n_classes": 1, "feature_kind": "exotic"})");
    REQUIRE_THROWS_AS(load_manifest(tmp.path / "manifest.json"), ValidationError);
}
