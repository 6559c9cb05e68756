#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "echocotr/model.hpp"

using namespace echocotr;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.stage_depths = {1, 1, 1, 1};
    c.stage_dims = {4, 4, 8, 8};
    c.head_dim = 4;
    c.ffn_ratio = 1.0;
    c.drop_path_max = 0.0;
    c.input_t = 2;
    c.input_h = 32;
    c.input_w = 32;
    return c;
}

template <typename T>
void fill_randn(TensorT<T>& t, RngStream& rng, double sd = 0.2) {
    for (int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = static_cast<T>(rng.normal(0.0, sd));
}

}  // namespace

TEST_CASE("config presets and validation") {
    ModelConfig s = ModelConfig::preset("S");
    CHECK(s.stage_depths == std::array<int64_t, 4>{3, 4, 8, 3});
    CHECK(s.stage_dims == std::array<int64_t, 4>{64, 128, 320, 512});
    CHECK(s.head_dim == 64);
    CHECK(s.drop_path_max == 0.1);
    ModelConfig b = ModelConfig::preset("B");
    CHECK(b.stage_depths == std::array<int64_t, 4>{5, 8, 20, 7});
    CHECK(b.drop_path_max == 0.3);
    CHECK_THROWS_AS(ModelConfig::preset("XL"), ConfigError);

    CHECK(s.ffn_hidden(64) == 256);

    ModelConfig bad = s;
    bad.head_dim = 48;  // does not divide 320
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.dpe_kernel = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.local_window = 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.drop_path_max = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.input_t = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.ffn_ratio = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config text round trip") {
    ModelConfig c = tiny_config();
    c.drop_path_max = 0.125;
    c.ffn_ratio = 3.5;
    ModelConfig back = ModelConfig::parse_text(c.canonical_text());
    CHECK(back == c);

    CHECK_THROWS_AS(ModelConfig::parse_text("bogus_key=1\n"), FormatError);
    CHECK_THROWS_AS(ModelConfig::parse_text("head_dim=64\n"), FormatError);  // missing keys
    std::string junk = c.canonical_text();
    junk.replace(junk.find("dpe_kernel=3"), 12, "dpe_kernel=x");
    CHECK_THROWS_AS(ModelConfig::parse_text(junk), FormatError);
}

TEST_CASE("token layout round trip") {
    RngStream rng(1);
    Tensor x = Tensor::randn({2, 3, 2, 2, 2}, rng);
    Tensor tok = to_tokens<float>(x, nullptr);
    CHECK(tok.shape == Shape{2, 8, 3});
    // token (n, t*h*w) carries channel c of x[n, c, t, h, w]
    CHECK(tok[0] == x[0]);                   // n0 l0 c0
    CHECK(tok[1] == x[8]);                   // n0 l0 c1
    CHECK(tok[3] == x[1]);                   // n0 l1 c0
    Tensor back = from_tokens<float>(tok, 2, 2, 2, nullptr);
    REQUIRE(back.shape == x.shape);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("patch embed grid sizes match the S-preset pipeline") {
    PatchEmbedT<float> embed1(1, 8, true);
    PatchEmbedT<float> down2(8, 8, false);
    PatchEmbedT<float> down3(8, 8, false);
    PatchEmbedT<float> down4(8, 8, false);
    RngStream rng(2);
    fill_randn(embed1.conv.w, rng);
    fill_randn(down2.conv.w, rng);
    fill_randn(down3.conv.w, rng);
    fill_randn(down4.conv.w, rng);

    Tensor x = Tensor::randn({1, 1, 36, 112, 112}, rng, 0.5);
    Tensor y1 = embed1.forward(x, nullptr);
    CHECK(y1.shape == Shape{1, 8, 18, 28, 28});
    Tensor y2 = down2.forward(y1, nullptr);
    CHECK(y2.shape == Shape{1, 8, 18, 14, 14});
    Tensor y3 = down3.forward(y2, nullptr);
    CHECK(y3.shape == Shape{1, 8, 18, 7, 7});
    Tensor y4 = down4.forward(y3, nullptr);
    CHECK(y4.shape == Shape{1, 8, 18, 3, 3});

    // minimum legal temporal extent: two frames embed to one
    Tensor t2 = Tensor::randn({1, 1, 2, 8, 8}, rng, 0.5);
    CHECK(embed1.forward(t2, nullptr).shape == Shape{1, 8, 1, 2, 2});

    CHECK_THROWS_AS(embed1.forward(Tensor({1, 1, 4, 3, 8}), nullptr), ConfigError);
    CHECK_THROWS_AS(embed1.forward(Tensor({1, 1, 1, 8, 8}), nullptr), ShapeError);
}

TEST_CASE("fresh blocks are the identity") {
    RngStream rng(3);
    RngStream drop(4);
    Tensor x = Tensor::randn({2, 4, 2, 3, 3}, rng);

    LocalBlockT<float> local(4, 3, 5, 8);
    Tensor ly = local.forward(x, /*training=*/true, drop, nullptr);
    REQUIRE(ly.shape == x.shape);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(ly[i] == x[i]);

    GlobalBlockT<float> global(4, 3, 2, 8);
    Tensor gy = global.forward(x, /*training=*/false, drop, nullptr);
    REQUIRE(gy.shape == x.shape);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(gy[i] == doctest::Approx(x[i]).epsilon(1e-6));
}

TEST_CASE("dpe is a residual depthwise convolution") {
    RngStream rng(5);
    LocalBlockT<float> blk(3, 3, 5, 6);  // everything but dpe stays zero
    fill_randn(blk.dpe.w, rng);
    fill_randn(blk.dpe.b, rng);

    Tensor x = Tensor::randn({1, 3, 4, 5, 5}, rng);
    RngStream drop(0);
    Tensor got = blk.forward(x, true, drop, nullptr);

    Tensor conv = conv3d(x, blk.dpe.w, &blk.dpe.b, {1, 1, 1}, {1, 1, 1}, 3);
    for (int64_t i = 0; i < x.size(); ++i)
        CHECK(got[i] == doctest::Approx(x[i] + conv[i]).epsilon(1e-5));
}

TEST_CASE("local block composes pw-dw-pw and a pointwise ffn") {
    RngStream rng(6);
    const int64_t c = 4, hidden = 8;
    LocalBlockT<float> blk(c, 3, 5, hidden);
    for (TensorT<float>* t : {&blk.pw1.w, &blk.pw1.b, &blk.dw.w, &blk.dw.b, &blk.pw2.w,
                              &blk.pw2.b, &blk.ffn1.w, &blk.ffn1.b, &blk.ffn2.w, &blk.ffn2.b,
                              &blk.dpe.w, &blk.bn1.gamma, &blk.bn1.beta, &blk.bn2.gamma,
                              &blk.bn2.beta})
        fill_randn(*t, rng);

    Tensor x = Tensor::randn({2, c, 3, 6, 6}, rng);

    // manual composition from the block's own tensors, separate conv calls
    Tensor x1 = add(x, conv3d(x, blk.dpe.w, &blk.dpe.b, {1, 1, 1}, {1, 1, 1}, c));
    Tensor h = batch_norm3d(x1, blk.bn1, true);
    h = conv3d(h, blk.pw1.w, &blk.pw1.b, {1, 1, 1}, {0, 0, 0});
    h = conv3d(h, blk.dw.w, &blk.dw.b, {1, 1, 1}, {2, 2, 2}, c);
    h = conv3d(h, blk.pw2.w, &blk.pw2.b, {1, 1, 1}, {0, 0, 0});
    Tensor x2 = add(x1, h);
    Tensor f = batch_norm3d(x2, blk.bn2, true);
    f = conv3d(f, blk.ffn1.w, &blk.ffn1.b, {1, 1, 1}, {0, 0, 0});
    f = conv3d(gelu(f), blk.ffn2.w, &blk.ffn2.b, {1, 1, 1}, {0, 0, 0});
    Tensor want = add(x2, f);

    RngStream drop(0);
    Tensor got = blk.forward(x, true, drop, nullptr);
    REQUIRE(got.shape == want.shape);
    for (int64_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("attention mixes values with weights that sum to one") {
    const int64_t c = 8, l = 5, n = 2;
    GlobalBlockT<float> blk(c, 3, 4, c);
    RngStream rng(7);
    fill_randn(blk.wq.w, rng);
    fill_randn(blk.wk.w, rng);
    // identity value/output projections expose the raw attention average
    for (int64_t i = 0; i < c; ++i) {
        blk.wv.w[i * c + i] = 1.0f;
        blk.wo.w[i * c + i] = 1.0f;
    }

    // all tokens within a sample identical => any convex combination returns them
    Tensor tok({n, l, c});
    RngStream vr(8);
    for (int64_t b = 0; b < n; ++b) {
        std::vector<float> row(c);
        for (auto& v : row) v = float(vr.normal(0.0, 1.0));
        for (int64_t t = 0; t < l; ++t)
            for (int64_t i = 0; i < c; ++i) tok[(b * l + t) * c + i] = row[size_t(i)];
    }
    Tensor out = blk.attention(tok, nullptr);
    REQUIRE(out.shape == tok.shape);
    for (int64_t i = 0; i < tok.size(); ++i)
        CHECK(out[i] == doctest::Approx(tok[i]).epsilon(1e-5));
}

TEST_CASE("global block is equivariant to token permutation") {
    const int64_t c = 8;
    GlobalBlockT<float> blk(c, 3, 4, 16);
    RngStream rng(9);
    for (TensorT<float>* t : {&blk.wq.w, &blk.wk.w, &blk.wv.w, &blk.wo.w, &blk.ffn1.w,
                              &blk.ffn2.w, &blk.ln1.g, &blk.ln1.b, &blk.ln2.g, &blk.ln2.b})
        fill_randn(*t, rng);
    // dpe stays zero: spatial convolution is the one non-equivariant piece

    Tensor x = Tensor::randn({1, c, 2, 2, 2}, rng);
    const int64_t L = 8;
    std::vector<int64_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[0], perm[5]);
    std::swap(perm[2], perm[7]);
    std::swap(perm[3], perm[4]);

    Tensor xp({1, c, 2, 2, 2});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < L; ++i) xp[ch * L + i] = x[ch * L + perm[size_t(i)]];

    RngStream drop(0);
    Tensor y = blk.forward(x, false, drop, nullptr);
    Tensor yp = blk.forward(xp, false, drop, nullptr);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < L; ++i)
            CHECK(yp[ch * L + i] == doctest::Approx(y[ch * L + perm[size_t(i)]]).epsilon(1e-4));
}

TEST_CASE("model forward shapes and guards") {
    ModelConfig cfg = tiny_config();
    EchoCoTrNet model(cfg);
    RngStream rng(10);
    model.init(rng);

    Tensor x = Tensor::randn({2, 1, 2, 32, 32}, rng, 0.5);
    RngStream warm(12, "warmup");
    model.set_training(true);
    model.forward(x, nullptr, &warm);  // batch norm needs stats before eval
    model.set_training(false);
    Tensor y = model.forward(x);
    CHECK(y.shape == Shape{2});
    CHECK(y.all_finite());

    CHECK_THROWS_AS(model.forward(Tensor({2, 2, 32, 32})), ShapeError);
    CHECK_THROWS_AS(model.forward(Tensor({2, 3, 2, 32, 32})), ShapeError);
    model.set_training(true);
    CHECK_THROWS_AS(model.forward(x), ConfigError);  // no drop rng in training
    model.set_training(false);

    // longer clips scale the token count without violating any stage
    Tensor x2 = Tensor::randn({1, 1, 16, 32, 32}, rng, 0.5);
    CHECK(model.forward(x2).shape == Shape{1});
}

TEST_CASE("init zeroes each residual branch's last projection") {
    ModelConfig cfg = tiny_config();
    EchoCoTrNet model(cfg);
    RngStream rng(11);
    model.init(rng);

    auto zero_all = [&](const TensorT<float>& t) {
        for (int64_t i = 0; i < t.size(); ++i)
            if (t[i] != 0.0f) return false;
        return true;
    };
    CHECK(zero_all(model.stage1[0].dpe.w));
    CHECK(zero_all(model.stage1[0].pw2.w));
    CHECK(zero_all(model.stage1[0].ffn2.w));
    CHECK(zero_all(model.stage3[0].wo.w));
    CHECK(zero_all(model.stage3[0].ffn2.w));
    CHECK(zero_all(model.stage4[0].dpe.w));
    CHECK(zero_all(model.head.b));
    CHECK_FALSE(zero_all(model.embed1.conv.w));
    CHECK_FALSE(zero_all(model.stage1[0].pw1.w));
    CHECK_FALSE(zero_all(model.stage3[0].wq.w));
    CHECK_FALSE(zero_all(model.head.w));
    // weights drawn from the truncated normal stay within two sigmas
    for (int64_t i = 0; i < model.head.w.size(); ++i) {
        CHECK(model.head.w[i] <= 0.04f);
        CHECK(model.head.w[i] >= -0.04f);
    }
}

TEST_CASE("drop path ramps linearly across blocks") {
    ModelConfig cfg;
    cfg.stage_depths = {2, 2, 2, 2};
    cfg.stage_dims = {4, 4, 8, 8};
    cfg.head_dim = 4;
    cfg.drop_path_max = 0.7;
    EchoCoTrNet model(cfg);
    const double step = 0.7 / 7.0;
    CHECK(model.stage1[0].drop_rate == doctest::Approx(0.0));
    CHECK(model.stage1[1].drop_rate == doctest::Approx(step));
    CHECK(model.stage2[0].drop_rate == doctest::Approx(2 * step));
    CHECK(model.stage3[0].drop_rate == doctest::Approx(4 * step));
    CHECK(model.stage4[1].drop_rate == doctest::Approx(0.7));
}

TEST_CASE("eval forward is deterministic and ignores drop rng") {
    ModelConfig cfg = tiny_config();
    cfg.drop_path_max = 0.5;
    EchoCoTrNet model(cfg);
    RngStream rng(12);
    model.init(rng);
    // zero-initialized branch projections would hide the drop masks entirely
    for (TensorT<float>* p : model.parameters()) fill_randn(*p, rng, 0.05);
    Tensor x = Tensor::randn({3, 1, 4, 32, 32}, rng, 0.5);

    // one training pass to populate BN running stats
    model.set_training(true);
    RngStream d1(100);
    model.forward(x, nullptr, &d1);
    model.set_training(false);

    Tensor a = model.forward(x);
    Tensor b = model.forward(x);
    RngStream d2(999);
    Tensor c = model.forward(x, nullptr, &d2);
    for (int64_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == b[i]);
        CHECK(a[i] == c[i]);
    }

    // training forwards differ across drop seeds (stochastic depth active)
    model.set_training(true);
    RngStream da(1), db(2);
    Tensor ta = model.forward(x, nullptr, &da);
    Tensor tb = model.forward(x, nullptr, &db);
    bool any_diff = false;
    for (int64_t i = 0; i < ta.size(); ++i) any_diff |= (ta[i] != tb[i]);
    CHECK(any_diff);
    // and replaying a seed replays the forward exactly
    RngStream dc(1);
    Tensor tc = model.forward(x, nullptr, &dc);
    for (int64_t i = 0; i < ta.size(); ++i) CHECK(ta[i] == tc[i]);
}

TEST_CASE("end-to-end gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    EchoCoTrNetT<double> model(cfg);
    RngStream rng(13);
    model.init(rng);
    model.set_training(true);  // batch-stat BN; drop rate is zero

    Tensor64 x = Tensor64::randn({2, 1, 2, 32, 32}, rng, 0.5);
    Tensor64 target({2}, std::vector<double>{0.3, -0.4});

    auto params = model.parameters();
    for (auto* p : params) p->requires_grad = true;

    RngStream drop(0);
    Tape64 tape;
    Tensor64 loss = mse_loss(model.forward(x, &tape, &drop), target, &tape);
    tape.backward(loss);

    auto run = [&]() {
        RngStream d(0);
        return mse_loss(model.forward(x, nullptr, &d), target).item();
    };

    RngStream pick(14);
    const double step = 1e-5;
    int checked = 0;
    double worst = 0.0;
    while (checked < 24) {
        TensorT<double>* p = params[size_t(pick.uniform_int(0, int64_t(params.size()) - 1))];
        const int64_t j = pick.uniform_int(0, p->size() - 1);
        const double saved = p->ptr()[j];
        p->ptr()[j] = saved + step;
        const double up = run();
        p->ptr()[j] = saved - step;
        const double down = run();
        p->ptr()[j] = saved;
        const double fd = (up - down) / (2.0 * step);
        REQUIRE(p->grad_ptr() != nullptr);
        worst = std::max(worst, std::abs(p->grad_ptr()[j] - fd));
        ++checked;
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("parameter counts grow from S to B") {
    int64_t s_count, b_count;
    {
        EchoCoTrNet s(ModelConfig::preset("S"));
        s_count = s.parameter_count();
    }
    {
        EchoCoTrNet b(ModelConfig::preset("B"));
        b_count = b.parameter_count();
    }
    CHECK(s_count > 10'000'000);   // transformer-scale network
    CHECK(b_count > s_count);

    EchoCoTrNet tiny(tiny_config());
    CHECK(tiny.parameter_count() < 100'000);
    CHECK(tiny.parameters().size() > 20);
    // named state includes BN running stats; parameters() excludes them
    CHECK(tiny.named_state().size() > tiny.parameters().size());
}

TEST_CASE("weights container round trip") {
    const std::string path = (fs::temp_directory_path() / "echocotr_model.ecw").string();
    ModelConfig cfg = tiny_config();
    EchoCoTrNet model(cfg);
    RngStream rng(15);
    model.init(rng);
    Tensor x = Tensor::randn({2, 1, 2, 32, 32}, rng, 0.5);
    model.set_training(true);
    RngStream drop(0);
    model.forward(x, nullptr, &drop);  // gives BN stats something to remember
    model.set_training(false);
    Tensor before = model.forward(x);

    save_weights(path, model);
    EchoCoTrNet loaded = load_weights(path);
    CHECK(loaded.cfg == cfg);
    auto a = model.named_state();
    auto b = loaded.named_state();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        REQUIRE(a[i].second->shape == b[i].second->shape);
        for (int64_t j = 0; j < a[i].second->size(); ++j)
            CHECK(a[i].second->ptr()[j] == b[i].second->ptr()[j]);
    }
    Tensor after = loaded.forward(x);
    for (int64_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);

    // corruption detection
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        in.close();
        std::ofstream bad(path + ".magic", std::ios::binary);
        bad << "NOPE" << bytes.substr(4);
        bad.close();
        std::ofstream cut(path + ".cut", std::ios::binary);
        cut.write(bytes.data(), std::streamsize(bytes.size() / 2));
        cut.close();
        std::ofstream extra(path + ".extra", std::ios::binary);
        extra << bytes << "x";
        extra.close();
    }
    CHECK_THROWS_AS(load_weights(path + ".magic"), FormatError);
    CHECK_THROWS_AS(load_weights(path + ".cut"), FormatError);
    CHECK_THROWS_AS(load_weights(path + ".extra"), FormatError);
    CHECK_THROWS_AS(load_weights(path + ".missing"), IoError);
    for (const char* suf : {"", ".magic", ".cut", ".extra"}) fs::remove(path + suf);
}
