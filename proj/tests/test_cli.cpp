#include <gtest/gtest.h>

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>

#include "cvnn/experiment.hpp"

using namespace cvnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cvnn_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

ExperimentConfig small_grating(const fs::path& out) {
    ExperimentConfig c = parse_config_text(R"(
        model.variant = custom
        model.start_filters = 2
        model.blocks_per_stage = 1
        model.in_channels = 1
        model.image_size = 8
        model.n_classes = 2
        data.kind = grating
        data.image_size = 8
        data.n_train = 96
        data.n_val = 32
        train.epochs = 3
        train.batch_size = 32
        train.dtype = float64
        seed = 5
    )");
    c.output_dir = out.string();
    return c;
}

ModelSpec tiny_spec() {
    ModelSpec s;
    s.variant = "custom";
    s.start_filters = 2;
    s.blocks_per_stage = 1;
    s.in_channels = 1;
    s.image_size = 8;
    s.n_classes = 2;
    return s;
}

template <typename T>
Checkpoint snapshot(Network<T>& net, const ModelSpec& spec) {
    Checkpoint ck;
    ck.spec = spec.serialize();
    ck.seed = 3;
    ck.meta["note"] = "x";
    auto params = net.parameters();
    auto buffers = net.buffers();
    ck.params = parameter_records<T>(params);
    ck.buffers = buffer_records<T>(buffers);
    return ck;
}

struct CliResult {
    int code;
    std::string out;
};

CliResult cli(const std::string& args) {
    const char* exe = std::getenv("CVNN_CLI");
    if (!exe) return {-1, "CVNN_CLI not set"};
    const fs::path log = fs::temp_directory_path() / ("cvnn_cli_" + std::to_string(::getpid()) + ".log");
    const int status = std::system((std::string(exe) + " " + args + " > " + log.string() + " 2>&1").c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    const ModelSpec spec = tiny_spec();
    auto f = build_model<float>(spec, 1);
    auto d = build_model<double>(spec, 1);
    for (const Checkpoint& ck : {snapshot(*f, spec), snapshot(*d, spec)}) {
        const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
        EXPECT_EQ(back, ck);
        const fs::path dir = scratch("ckpt");
        save_checkpoint(dir / "a.ckpt", ck);
        EXPECT_EQ(load_checkpoint(dir / "a.ckpt"), ck);
        fs::remove_all(dir);
    }
    EXPECT_EQ(snapshot(*f, spec).params.front().dtype, Dtype::f32);
}

TEST(Checkpoint, RestoredModelGivesIdenticalOutput) {
    const ModelSpec spec = tiny_spec();
    auto a = build_model<double>(spec, 1);
    auto b = build_model<double>(spec, 2);
    Rng rng(1);
    Tensor<double> x(Shape{4, 1, 8, 8});
    for (auto& v : x.vec()) v = rng.normal();
    Tape<double> warm;
    a->forward(warm, x, true);
    restore_model(*b, decode_checkpoint(encode_checkpoint(snapshot(*a, spec))));
    Tape<double> ta, tb;
    EXPECT_EQ(a->forward(ta, x, false).value(), b->forward(tb, x, false).value());
}

TEST(Checkpoint, RejectsVersionMagicAndTruncation) {
    const ModelSpec spec = tiny_spec();
    auto net = build_model<double>(spec, 1);
    const auto bytes = encode_checkpoint(snapshot(*net, spec));
    auto v2 = bytes;
    v2[4] = 2;
    try {
        decode_checkpoint(v2);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
    }
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
    EXPECT_THROW(decode_checkpoint({bytes.begin(), bytes.end() - 3}), CheckpointError);
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(decode_checkpoint(extra), CheckpointError);
}

TEST(Checkpoint, MismatchedModelRejected) {
    auto a = build_model<double>(tiny_spec(), 1);
    ModelSpec other = tiny_spec();
    other.start_filters = 4;
    auto b = build_model<double>(other, 1);
    auto params = b->parameters();
    EXPECT_THROW(restore_parameters<double>(params, snapshot(*a, tiny_spec()).params), CheckpointError);
}

TEST(Config, ParsesKeysCommentsAndOverrides) {
    const ExperimentConfig c = parse_config_text(
        "# comment\nmodel.start_filters = 6   # trailing\n\nopt.lr = 0.05\nseed=9\nseed = 10\n");
    EXPECT_EQ(c.model.start_filters, 6u);
    EXPECT_EQ(c.schedule, "0:0.050000000000000003");
    EXPECT_DOUBLE_EQ(LrSchedule::parse(c.schedule).at(100), 0.05);
    EXPECT_EQ(c.seed, 10u);
    EXPECT_THROW(parse_config_text("bogus.key = 1"), ConfigError);
    EXPECT_THROW(parse_config_text("train.epochs = ten"), ConfigError);
    EXPECT_THROW(parse_config_text("train.epochs = -3"), ConfigError);
    EXPECT_THROW(parse_config_text("just words"), ConfigError);
}

TEST(Config, ResolvedEchoReparsesToSameConfig) {
    ExperimentConfig c = small_grating("/tmp/x");
    c.data.noise = 0.1 + 0.2;
    const std::string text = resolved_config_text(c);
    EXPECT_EQ(resolved_config_text(parse_config_text(text)), text);
    EXPECT_DOUBLE_EQ(parse_config_text(text).data.noise, 0.1 + 0.2);
}

TEST(Config, EnvironmentOverridesWin) {
    const fs::path dir = scratch("env");
    std::ofstream(dir / "c.cfg") << resolved_config_text(small_grating(dir / "out"));
    ::setenv("CVNN_TRAIN_EPOCHS", "7", 1);
    ::setenv("CVNN_OPT_LR", "0.25", 1);
    const ExperimentConfig c = load_config(dir / "c.cfg");
    ::unsetenv("CVNN_TRAIN_EPOCHS");
    ::unsetenv("CVNN_OPT_LR");
    EXPECT_EQ(c.epochs, 7u);
    EXPECT_DOUBLE_EQ(LrSchedule::parse(c.schedule).at(0), 0.25);
    EXPECT_EQ(load_config(dir / "c.cfg").epochs, 3u);
    fs::remove_all(dir);
}

TEST(Config, CrossFieldValidation) {
    ExperimentConfig c = small_grating("/tmp/x");
    c.model.n_classes = 3;
    EXPECT_THROW(validate_config(c), ConfigError);
    c = small_grating("/tmp/x");
    c.data.kind = "cifar";
    c.data.train_path = "/nonexistent/data_batch_1.bin";
    EXPECT_THROW(validate_config(c), ConfigError);
    c = small_grating("/tmp/x");
    c.dtype = "float16";
    EXPECT_THROW(validate_config(c), ConfigError);
    EXPECT_THROW(load_config("/nonexistent.cfg"), ConfigError);
}

TEST(Config, ShippedConfigsAreValid) {
    for (const char* name : {"grating_tiny_complex.cfg", "phasor_convlstm.cfg"})
        EXPECT_NO_THROW(load_config(fs::path(CVNN_SOURCE_DIR) / "configs" / name, false)) << name;
}

TEST(Cifar, SingleBlackRecord) {
    const fs::path dir = scratch("cifar0");
    write_bytes(dir / "a.bin", std::vector<unsigned char>(kCifarRecord, 0));
    const auto d = load_cifar_binary<double>(dir / "a.bin");
    EXPECT_EQ(d.x.shape(), (Shape{1, 3, 32, 32}));
    EXPECT_EQ(d.labels, std::vector<int>{0});
    for (double v : d.x.vec()) EXPECT_EQ(v, 0.0);
    fs::remove_all(dir);
}

TEST(Cifar, TruncatedFileNamesSizes) {
    const fs::path dir = scratch("cifar1");
    write_bytes(dir / "a.bin", std::vector<unsigned char>(kCifarRecord + 100, 0));
    try {
        load_cifar_binary<double>(dir / "a.bin");
        FAIL();
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("3173"), std::string::npos) << msg;
        EXPECT_NE(msg.find("3073"), std::string::npos) << msg;
    }
    EXPECT_THROW(load_cifar_binary<double>(dir / "missing.bin"), DataError);
    fs::remove_all(dir);
}

TEST(Cifar, LabelAboveNineRejected) {
    const fs::path dir = scratch("cifar2");
    std::vector<unsigned char> b(kCifarRecord, 0);
    b[0] = 10;
    write_bytes(dir / "a.bin", b);
    EXPECT_THROW(load_cifar_binary<double>(dir / "a.bin"), DataError);
    fs::remove_all(dir);
}

TEST(Cifar, FullIntensityNormalizesByTrainingStats) {
    const fs::path dir = scratch("cifar3");
    std::vector<unsigned char> b(3 * kCifarRecord, 0);
    b[kCifarRecord] = 7;
    std::fill(b.begin() + kCifarRecord + 1, b.begin() + 2 * kCifarRecord, 255);
    std::fill(b.begin() + 2 * kCifarRecord + 1, b.end(), 51);
    write_bytes(dir / "a.bin", b);
    auto d = load_cifar_binary<double>(dir / "a.bin");
    EXPECT_EQ(d.labels[1], 7);
    EXPECT_EQ(d.x[3072], 1.0);
    const Normalization n = channel_statistics(d.x);
    const double mean = 1.2 / 3, var = (mean * mean + (1 - mean) * (1 - mean) + (0.2 - mean) * (0.2 - mean)) / 3;
    EXPECT_NEAR(n.mean[0], mean, 1e-12);
    EXPECT_NEAR(n.std[2], std::sqrt(var), 1e-12);
    apply_normalization(d.x, n);
    EXPECT_NEAR(d.x[3072], (1.0 - n.mean[0]) / n.std[0], 1e-15);
    fs::remove_all(dir);
}

TEST(Cifar, RunStoresNormalizationForEval) {
    const fs::path dir = scratch("cifar4");
    Rng rng(2);
    std::vector<unsigned char> b(6 * kCifarRecord);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = (i % kCifarRecord == 0) ? rng.index(10) : rng.index(256);
    write_bytes(dir / "train.bin", b);
    write_bytes(dir / "val.bin", {b.begin(), b.begin() + 2 * kCifarRecord});
    ExperimentConfig c = parse_config_text(
        "model.variant = custom\nmodel.start_filters = 2\nmodel.blocks_per_stage = 1\n"
        "model.n_classes = 10\ntrain.epochs = 1\ntrain.batch_size = 3\ndata.kind = cifar\n");
    c.data.train_path = (dir / "train.bin").string();
    c.data.val_path = (dir / "val.bin").string();
    c.output_dir = (dir / "out").string();
    const RunResult r = run_experiment(c);
    EXPECT_FALSE(r.aborted);
    const Checkpoint ck = load_checkpoint(dir / "out" / "last.ckpt");
    const Normalization n = stored_normalization(ck);
    ASSERT_EQ(n.mean.size(), 3u);
    const auto raw = load_cifar_binary<double>(dir / "train.bin");
    // The run trains in float32, so its statistics carry single precision.
    EXPECT_NEAR(n.mean[1], channel_statistics(raw.x).mean[1], 1e-6);
    const EvalResult e = evaluate_checkpoint(dir / "out" / "last.ckpt", (dir / "val.bin").string());
    EXPECT_TRUE(std::isfinite(e.loss));
    fs::remove_all(dir);
}

TEST(SyntheticData, SeedDeterminism) {
    EXPECT_EQ(synthetic_image_task<double>(10, 3).x, synthetic_image_task<double>(10, 3).x);
    EXPECT_NE(synthetic_image_task<double>(10, 3).x, synthetic_image_task<double>(10, 4).x);
    EXPECT_EQ(synthetic_phasor_sequences<double>(4, 5, 3).x, synthetic_phasor_sequences<double>(4, 5, 3).x);
    EXPECT_THROW(synthetic_image_task<double>(0, 1), std::invalid_argument);
}

TEST(SyntheticData, NoiselessPhasorIsAFixedRotation) {
    PhasorParams p;
    p.noise = 0;
    p.omega = 0.7;
    const auto d = synthetic_phasor_sequences<double>(3, 6, 5, p);
    const std::size_t F = p.size * p.size;
    double err = 0;
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t t = 0; t + 1 < 6; ++t)
            for (std::size_t k = 0; k < F; ++k) {
                const std::size_t a = (n * 6 + t) * 2 * F + k, b = (n * 6 + t + 1) * 2 * F + k;
                const std::complex<double> z(d.x[a], d.x[a + F]), next(d.x[b], d.x[b + F]);
                err = std::max(err, std::abs(std::polar(1.0, p.omega) * z - next));
            }
    EXPECT_LT(err, 1e-12);
}

TEST(Run, IdenticalConfigsGiveIdenticalHistories) {
    const fs::path dir = scratch("repro");
    const ExperimentConfig a = small_grating(dir / "a"), b = small_grating(dir / "b");
    run_experiment(a);
    run_experiment(b);
    const std::string ha = slurp(dir / "a" / "history.csv");
    EXPECT_EQ(ha, slurp(dir / "b" / "history.csv"));
    std::istringstream is(ha);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, kHistoryHeader);
    int prev = -1, rows = 0;
    while (std::getline(is, line)) {
        const int e = std::stoi(line.substr(0, line.find(',')));
        EXPECT_GT(e, prev);
        prev = e;
        ++rows;
        EXPECT_NE(line.find(",ok,5"), std::string::npos) << line;
    }
    EXPECT_EQ(rows, 3);
    EXPECT_EQ(resolved_config_text(parse_config_text(slurp(dir / "a" / "config.resolved"))),
              slurp(dir / "a" / "config.resolved"));
    fs::remove_all(dir);
}

TEST(Run, ResumeMatchesUninterruptedRun) {
    const fs::path dir = scratch("resume");
    const RunResult full = run_experiment(small_grating(dir / "full"));
    ExperimentConfig head = small_grating(dir / "head");
    head.epochs = 2;
    run_experiment(head);
    ExperimentConfig tail = small_grating(dir / "tail");
    tail.resume = (dir / "head" / "last.ckpt").string();
    const RunResult resumed = run_experiment(tail);
    ASSERT_EQ(full.history.size(), 3u);
    ASSERT_EQ(resumed.history.size(), 3u);
    EXPECT_NEAR(resumed.history[2].train_loss, full.history[2].train_loss, 1e-10);
    EXPECT_NEAR(resumed.history[2].val_loss, full.history[2].val_loss, 1e-10);
    fs::remove_all(dir);
}

TEST(Run, ResumeRejectsDifferentModel) {
    const fs::path dir = scratch("resume_bad");
    ExperimentConfig head = small_grating(dir / "head");
    head.epochs = 1;
    run_experiment(head);
    ExperimentConfig other = small_grating(dir / "other");
    other.model.start_filters = 4;
    other.resume = (dir / "head" / "last.ckpt").string();
    EXPECT_THROW(run_experiment(other), CheckpointError);
    fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
    ASSERT_NE(std::getenv("CVNN_CLI"), nullptr) << "run through ctest";
    const fs::path dir = scratch("cli");
    std::ofstream(dir / "c.cfg") << resolved_config_text(small_grating(dir / "out"));

    const auto budget = cli("verify budget");
    EXPECT_EQ(budget.code, 0) << budget.out;
    EXPECT_NE(budget.out.find("CWS"), std::string::npos);
    EXPECT_EQ(cli("verify nosuch").code, 2);
    EXPECT_EQ(cli("run /nonexistent.cfg").code, 2);
    EXPECT_EQ(cli("run " + (dir / "c.cfg").string() + " --set bogus=1").code, 2);

    const auto nan = cli("run " + (dir / "c.cfg").string() + " --set opt.lr=1e30 --set opt.clip_norm=0 --set output_dir=" +
                         (dir / "nan").string());
    EXPECT_EQ(nan.code, 3) << nan.out;
    const std::string hist = slurp(dir / "nan" / "history.csv");
    EXPECT_NE(hist.find("nan_guard:"), std::string::npos) << hist;

    const auto ok = cli("run " + (dir / "c.cfg").string() + " --set train.epochs=1");
    EXPECT_EQ(ok.code, 0) << ok.out;
    const auto ev = cli("eval " + (dir / "out" / "last.ckpt").string() + " val");
    ASSERT_EQ(ev.code, 0) << ev.out;
    const auto j = nlohmann::json::parse(ev.out);
    EXPECT_TRUE(j.contains("loss"));
    EXPECT_GE(j["metric"].get<double>(), 0.0);

    const auto fl = cli("flops " + (dir / "c.cfg").string());
    EXPECT_EQ(fl.code, 0);
    EXPECT_NE(fl.out.find("total"), std::string::npos);

    const auto el = cli("ellipticity --layers 3 --points 200 --mode naive --seeds 2");
    EXPECT_EQ(el.code, 0);
    EXPECT_EQ(std::count(el.out.begin(), el.out.end(), '\n'), 1 + 2 * 4);
    fs::remove_all(dir);
}
