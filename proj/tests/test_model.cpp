#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <type_traits>

#include "fixtures.hpp"
#include "r3mem/checkpoint.hpp"
#include "r3mem/model.hpp"

using namespace r3mem;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T> & a, const Tensor<T> & b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(double(a.at((int) i)) - double(b.at((int) i))));
    return worst;
}

template <typename T>
bool bitwise_equal(const Tensor<T> & a, const Tensor<T> & b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

std::vector<int> random_byte_ids(uint64_t seed, int n) {
    std::mt19937_64  rng(seed);
    std::vector<int> ids((size_t) n);
    for (auto & id : ids) id = int(rng() % 256);
    return ids;
}

std::filesystem::path tmp_dir() {
    auto p = std::filesystem::temp_directory_path() / "r3mem_model_tests";
    std::filesystem::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("config validation") {
    ModelConfig cfg;
    cfg.validate(); // defaults are fine

    ModelConfig bad = cfg;
    bad.d_model     = 130; // not divisible by 4 heads
    CHECK_THROWS_AS(bad.validate(), usage_error);

    bad         = cfg;
    bad.window  = 18; // 2m + 2 with m = 8
    CHECK_THROWS_AS(bad.validate(), usage_error);
    bad.window = 19;
    bad.validate();

    bad           = cfg;
    bad.precision = 16;
    CHECK_THROWS_AS(bad.validate(), usage_error);

    bad         = cfg;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), usage_error);

    CHECK(cfg.content_capacity() == 256 - 16);
}

TEST_CASE("config text roundtrip") {
    ModelConfig cfg    = fixtures::micro_config();
    cfg.adapter_scale  = 12.5;
    cfg.dropout        = 0.25;
    auto [back, flag]  = ModelConfig::from_text(cfg.to_text(true));
    CHECK(flag);
    CHECK(back.vocab_size == cfg.vocab_size);
    CHECK(back.d_model == cfg.d_model);
    CHECK(back.n_heads == cfg.n_heads);
    CHECK(back.n_layers == cfg.n_layers);
    CHECK(back.ffn_dim == cfg.ffn_dim);
    CHECK(back.window == cfg.window);
    CHECK(back.mem_tokens == cfg.mem_tokens);
    CHECK(back.adapter_rank == cfg.adapter_rank);
    CHECK(back.adapter_scale == cfg.adapter_scale);
    CHECK(back.dropout == cfg.dropout);
    CHECK(back.precision == cfg.precision);
    CHECK_FALSE(ModelConfig::from_text(cfg.to_text(false)).second);
    CHECK_THROWS_AS(ModelConfig::from_text("nonsense=1\n"), format_error);
    CHECK_THROWS_AS(ModelConfig::from_text("no equals sign"), format_error);
}

TEST_CASE("additive coupling on toy maps") {
    auto two  = [](const Tensor<double> & v) { return scale(v, 2.0); };
    auto plus = [](const Tensor<double> & v) { return add(v, Tensor<double>::full(v.shape(), 1.0)); };

    auto x1 = Tensor<double>::scalar(1.0), x2 = Tensor<double>::scalar(2.0);
    auto [y1, y2] = detail::couple_forward(x1, x2, two, plus);
    CHECK(y1.at(0) == 5.0); // 1 + 2*2
    CHECK(y2.at(0) == 8.0); // 2 + (5+1)

    auto [r1, r2] = detail::couple_inverse(y1, y2, two, plus);
    CHECK(r1.at(0) == 1.0);
    CHECK(r2.at(0) == 2.0);
}

TEST_CASE("zero weights make every block the identity") {
    auto P = fixtures::zero_params<float>(fixtures::micro_config(), true);
    std::mt19937_64 rng(1);
    auto x1 = Tensor<float>::randn({6, P.cfg.d_model}, rng, 1.0);
    auto x2 = Tensor<float>::randn({6, P.cfg.d_model}, rng, 1.0);
    const RunFlags off{};
    for (int b = 0; b < P.cfg.n_layers; ++b) {
        auto [y1, y2] = coupling_forward(P, b, x1, x2, off);
        CHECK(bitwise_equal(y1, x1));
        CHECK(bitwise_equal(y2, x2));
    }
}

TEST_CASE("adapter deltas") {
    const RunFlags off{};

    SUBCASE("zero up projection gives an exactly zero delta") {
        auto P = RevformerParams<float>::init_base(fixtures::micro_config(), 3);
        P.attach_adapters(4);
        std::mt19937_64 rng(5);
        auto x = Tensor<float>::randn({3, P.cfg.d_model}, rng, 1.0);
        for (auto stream : {AdapterStream::F, AdapterStream::G}) {
            auto d = adapter_delta(P, 0, stream, x, off);
            for (size_t i = 0; i < d.numel(); ++i) CHECK(d.at((int) i) == 0.0f);
        }
    }

    SUBCASE("rank one by hand") {
        ModelConfig cfg;
        cfg.d_model       = 2;
        cfg.n_heads       = 1;
        cfg.n_layers      = 1;
        cfg.ffn_dim       = 4;
        cfg.window        = 16;
        cfg.mem_tokens    = 1;
        cfg.adapter_rank  = 1;
        cfg.adapter_scale = 1.0;
        cfg.dropout       = 0.0;
        auto P = RevformerParams<double>::init_base(cfg, 0);
        P.attach_adapters(0);
        P.adapters[0].f.down = Tensor<double>::from({2, 1}, {1, 0});
        P.adapters[0].f.up   = Tensor<double>::from({1, 2}, {5, 0});
        auto x = Tensor<double>::from({1, 2}, {2, 3});
        auto d = adapter_delta(P, 0, AdapterStream::F, x, off);
        CHECK(d.at(0) == 2.0 * 5.0); // (x . down) * up, no nonlinearity on F
        CHECK(d.at(1) == 0.0);
    }

    SUBCASE("scale is alpha over r, and G applies silu") {
        auto cfg = fixtures::micro_config(); // alpha 8, r 4
        auto P   = fixtures::rand_params<double>(cfg, 6);
        std::mt19937_64 rng(7);
        auto x = Tensor<double>::randn({3, cfg.d_model}, rng, 1.0);

        auto & a      = P.adapters[1];
        auto manual_f = scale(matmul(matmul(x, a.f.down), a.f.up), cfg.adapter_scale / cfg.adapter_rank);
        CHECK(bitwise_equal(adapter_delta(P, 1, AdapterStream::F, x, off), manual_f));

        auto manual_g = scale(matmul(silu(matmul(x, a.g.down)), a.g.up), cfg.adapter_scale / cfg.adapter_rank);
        CHECK(bitwise_equal(adapter_delta(P, 1, AdapterStream::G, x, off), manual_g));
    }

    SUBCASE("dropout hits the bottleneck only in training") {
        auto cfg    = fixtures::micro_config();
        cfg.dropout = 0.5;
        auto P      = fixtures::rand_params<double>(cfg, 8);
        std::mt19937_64 rng(9);
        auto x = Tensor<double>::randn({3, cfg.d_model}, rng, 1.0);

        auto quiet = adapter_delta(P, 0, AdapterStream::F, x, off);
        std::mt19937_64 drop_rng(10);
        RunFlags        train{true, &drop_rng};
        auto noisy = adapter_delta(P, 0, AdapterStream::F, x, train);
        CHECK_FALSE(bitwise_equal(quiet, noisy));

        RunFlags broken{true, nullptr};
        CHECK_THROWS_AS(adapter_delta(P, 0, AdapterStream::F, x, broken), usage_error);
    }
}

TEST_CASE("coupling blocks invert") {
    auto run = [](auto P, double tol) {
        using T = std::decay_t<decltype(P.embed.at(0))>;
        std::mt19937_64 rng(11);
        auto x1 = Tensor<T>::randn({10, P.cfg.d_model}, rng, 1.0);
        auto x2 = Tensor<T>::randn({10, P.cfg.d_model}, rng, 1.0);
        const RunFlags off{};

        for (int b = 0; b < P.cfg.n_layers; ++b) {
            auto [y1, y2] = coupling_forward(P, b, x1, x2, off);
            auto [r1, r2] = coupling_inverse(P, b, y1, y2);
            CHECK(max_abs_diff(r1, x1) <= tol);
            CHECK(max_abs_diff(r2, x2) <= tol);
        }

        auto a1 = x1, a2 = x2;
        for (int b = 0; b < P.cfg.n_layers; ++b) std::tie(a1, a2) = coupling_forward(P, b, a1, a2, off);
        for (int b = P.cfg.n_layers - 1; b >= 0; --b) std::tie(a1, a2) = coupling_inverse(P, b, a1, a2);
        CHECK(max_abs_diff(a1, x1) <= tol);
        CHECK(max_abs_diff(a2, x2) <= tol);
    };
    run(fixtures::rand_params<double>(fixtures::micro_config(), 12), 1e-9);
    run(fixtures::rand_params<float>(fixtures::micro_config(), 12), 1e-4);
}

TEST_CASE("inversion detects a perturbed stream") {
    auto P = fixtures::rand_params<double>(fixtures::micro_config(), 13);
    std::mt19937_64 rng(14);
    auto x1 = Tensor<double>::randn({8, P.cfg.d_model}, rng, 1.0);
    auto x2 = Tensor<double>::randn({8, P.cfg.d_model}, rng, 1.0);
    const RunFlags off{};
    auto [y1, y2] = coupling_forward(P, 0, x1, x2, off);
    y2.at(3, 5) += 1.0;
    auto [r1, r2] = coupling_inverse(P, 0, y1, y2);
    CHECK(std::max(max_abs_diff(r1, x1), max_abs_diff(r2, x2)) >= 0.99);
}

TEST_CASE("attaching zero adapters leaves logits bitwise unchanged") {
    auto base = RevformerParams<float>::init_base(fixtures::micro_config(), 15);
    auto ids  = random_byte_ids(16, 20);
    const RunFlags off{};
    auto plain = forward_segmented(base, ids, off);

    auto tuned = base; // shares the frozen arrays
    tuned.attach_adapters(17);
    auto after = forward_segmented(tuned, ids, off);

    CHECK(plain.n_segments == 1);
    CHECK(after.n_segments == 1);
    CHECK(bitwise_equal(plain.logits, after.logits));
}

TEST_CASE("causal masking: later tokens cannot move earlier logits") {
    auto ids = random_byte_ids(18, 12);
    auto mutated = ids;
    mutated[7] = (mutated[7] + 1) % 256;
    const RunFlags off{};

    auto check_prefix = [&](auto & P) {
        auto a = forward_segmented(P, ids, off).logits;
        auto b = forward_segmented(P, mutated, off).logits;
        for (int r = 0; r < 7; ++r)
            for (int c = 0; c < a.cols(); ++c) CHECK(a.at(r, c) == b.at(r, c));
    };
    auto base = RevformerParams<float>::init_base(fixtures::micro_config(), 19);
    check_prefix(base);
    auto tuned = fixtures::rand_params<float>(fixtures::micro_config(), 20);
    check_prefix(tuned);
}

TEST_CASE("segment plans") {
    auto plan = SegmentPlan::build(10, 4);
    REQUIRE(plan.spans.size() == 3);
    CHECK(plan.spans[0] == std::pair<int, int>{0, 4});
    CHECK(plan.spans[1] == std::pair<int, int>{4, 8});
    CHECK(plan.spans[2] == std::pair<int, int>{8, 10});
    CHECK(SegmentPlan::build(4, 4).spans.size() == 1);
    CHECK_THROWS_AS(SegmentPlan::build(0, 4), usage_error);
    CHECK_THROWS_AS(SegmentPlan::build(4, 0), usage_error);
}

TEST_CASE("segmented forward") {
    auto cfg = fixtures::micro_config();
    auto P   = fixtures::rand_params<float>(cfg, 21);
    const RunFlags off{};
    const int cap = cfg.content_capacity(); // 56

    SUBCASE("single segment equals one raw window") {
        auto ids = random_byte_ids(22, 20);
        auto seg = forward_segmented(P, ids, off);
        auto raw = run_window(P, ids.data(), (int) ids.size(), (const Tensor<float> *) nullptr, off);
        CHECK(seg.n_segments == 1);
        CHECK(bitwise_equal(seg.logits, raw.content_logits));
    }

    SUBCASE("carried state is handed over bitwise") {
        auto ids = random_byte_ids(23, cap + 24);
        SegmentTrace<float> trace;
        auto out = forward_segmented(P, ids, off, &trace);
        CHECK(out.n_segments == 2);
        CHECK(out.logits.dim(0) == (int) ids.size());
        REQUIRE(trace.write_states.size() == 2);
        REQUIRE(trace.read_inputs.size() == 1);
        CHECK(bitwise_equal(trace.read_inputs[0], trace.write_states[0]));
        CHECK(trace.write_states[0].dim(0) == cfg.mem_tokens);
    }

    SUBCASE("explicit segment length") {
        auto ids          = random_byte_ids(24, 80);
        SegmentTrace<float> * no_trace = nullptr;
        CHECK(forward_segmented(P, ids, off, no_trace, 40).n_segments == 2);
        CHECK_THROWS_AS(forward_segmented(P, ids, off, no_trace, cap + 1), usage_error);
        CHECK_THROWS_AS(forward_segmented(P, std::vector<int>{}, off), usage_error);
    }

    SUBCASE("same weights run at several window sizes") {
        auto ids = random_byte_ids(25, 24);
        auto at_window = [&](int w) {
            auto Q       = P;
            Q.cfg.window = w;
            return forward_segmented(Q, ids, off).logits;
        };
        auto w64 = at_window(64);
        CHECK(bitwise_equal(w64, at_window(32)));
        CHECK(bitwise_equal(w64, at_window(48)));
    }
}

TEST_CASE("flipped model") {
    auto P = fixtures::rand_params<float>(fixtures::micro_config(), 26);
    auto ids = random_byte_ids(27, 30);

    auto a = flipped_forward(P, ids);
    auto b = flipped_forward(P, ids);
    CHECK(bitwise_equal(a, b));
    CHECK(a.dim(0) == 30);
    CHECK(a.dim(1) == P.cfg.vocab_size);

    CHECK_THROWS_AS(flipped_forward(P, std::vector<int>{}), usage_error);
    CHECK_THROWS_AS(flipped_forward(P, random_byte_ids(28, P.cfg.window + 1)), usage_error);
}

TEST_CASE("greedy generation") {
    auto P = fixtures::rand_params<float>(fixtures::micro_config(), 29);
    std::vector<int> prompt{65, 66, 67};

    CHECK(generate(P, Direction::fwd, prompt, 0, 258).empty());
    auto g1 = generate(P, Direction::fwd, prompt, 5, 258);
    auto g2 = generate(P, Direction::fwd, prompt, 5, 258);
    CHECK(g1 == g2);
    CHECK(g1.size() <= 5);

    // the backward direction refuses to grow past the window
    auto full = random_byte_ids(30, P.cfg.window);
    CHECK(generate(P, Direction::bwd, full, 5, 258).empty());

    CHECK_THROWS_AS(generate(P, Direction::fwd, std::vector<int>{}, 5, 258), usage_error);
}

TEST_CASE("named arrays and the frozen hash") {
    auto P = RevformerParams<float>::init_base(fixtures::micro_config(), 31);
    const int L = P.cfg.n_layers;
    CHECK((int) P.named_arrays().size() == 2 + 8 * L);
    CHECK_THROWS_AS(P.trainable_arrays(), usage_error);

    const uint64_t before = P.base_hash();
    CHECK(P.base_hash() == before);

    P.attach_adapters(32);
    CHECK((int) P.named_arrays().size() == 2 + 8 * L + 1 + 4 * L);
    CHECK((int) P.trainable_arrays().size() == 1 + 4 * L);
    CHECK(P.base_hash() == before); // adapters live outside the frozen set

    const RunFlags off{};
    forward_segmented(P, random_byte_ids(33, 10), off);
    CHECK(P.base_hash() == before);

    P.blocks[0].wq.at(0, 0) += 1.0f;
    CHECK(P.base_hash() != before);
}

TEST_CASE("checkpoint roundtrip") {
    auto dir = tmp_dir();

    SUBCASE("adapter model survives bitwise") {
        auto P = fixtures::rand_params<float>(fixtures::micro_config(), 34);
        const std::string path = (dir / "adapter.ckpt").string();
        save_checkpoint(path, P);
        auto Q = load_checkpoint_f32(path);
        CHECK(Q.has_adapters);
        CHECK(Q.cfg.to_text(true) == P.cfg.to_text(true));
        auto an = P.named_arrays(), bn = Q.named_arrays();
        REQUIRE(an.size() == bn.size());
        for (size_t i = 0; i < an.size(); ++i) {
            CHECK(an[i].first == bn[i].first);
            CHECK(bitwise_equal(*an[i].second, *bn[i].second));
        }
    }

    SUBCASE("base model keeps its shape set") {
        auto P = RevformerParams<float>::init_base(fixtures::micro_config(), 35);
        const std::string path = (dir / "base.ckpt").string();
        save_checkpoint(path, P);
        auto Q = load_checkpoint_f32(path);
        CHECK_FALSE(Q.has_adapters);
        CHECK(Q.base_hash() == P.base_hash());
    }

    SUBCASE("double load casts from the f32 file") {
        auto P = fixtures::rand_params<float>(fixtures::micro_config(), 36);
        const std::string path = (dir / "cast.ckpt").string();
        save_checkpoint(path, P);
        auto Q = load_checkpoint<double>(path);
        CHECK(max_abs_diff(Q.embed, P.embed.cast<double>()) == 0.0);
    }

    SUBCASE("corruption is rejected") {
        auto P = fixtures::rand_params<float>(fixtures::micro_config(), 37);
        const std::string path = (dir / "corrupt.ckpt").string();
        save_checkpoint(path, P);

        std::ifstream in(path, std::ios::binary);
        std::string   bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();

        auto rewrite = [&](const std::string & b) {
            std::ofstream out(path, std::ios::binary | std::ios::trunc);
            out.write(b.data(), (std::streamsize) b.size());
        };

        std::string bad  = bytes;
        bad[0]           = 'X';
        rewrite(bad);
        CHECK_THROWS_AS(load_checkpoint_f32(path), format_error);

        bad    = bytes;
        bad[4] = char(bad[4] + 1); // version field
        rewrite(bad);
        CHECK_THROWS_AS(load_checkpoint_f32(path), format_error);

        bad = bytes.substr(0, bytes.size() / 2);
        rewrite(bad);
        CHECK_THROWS_AS(load_checkpoint_f32(path), format_error);

        CHECK_THROWS_AS(load_checkpoint_f32((dir / "missing.ckpt").string()), usage_error);
    }
}
