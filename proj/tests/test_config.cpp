#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "mvps/pipeline.hpp"

using namespace mvps;

namespace {

std::size_t parse_error_line(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const ParseError& e) {
        return e.line();
    }
    return 0;
}

}  // namespace

TEST(ConfigText, ParsesKeysValuesAndComments) {
    const auto e = parse_config_text("# header\n\n  refine.lambda_min = 0.1  # trailing\nseed=7\noutput.dir = a b\n");
    ASSERT_EQ(e.size(), 3u);
    EXPECT_EQ(e[0].key, "refine.lambda_min");
    EXPECT_EQ(e[0].value, "0.1");
    EXPECT_EQ(e[0].line, 3u);
    EXPECT_EQ(e[1].key, "seed");
    EXPECT_EQ(e[1].value, "7");
    EXPECT_EQ(e[2].value, "a b");
    EXPECT_TRUE(parse_config_text("").empty());
}

TEST(ConfigText, ErrorsNameTheLine) {
    EXPECT_EQ(parse_error_line("a = 1\nno equals sign\n"), 2u);
    EXPECT_EQ(parse_error_line("= 3\n"), 1u);
    EXPECT_EQ(parse_error_line("a = 1\n\nbad key! = 2\n"), 3u);
    EXPECT_EQ(parse_error_line("a = 1\nb = 2\na = 3\n"), 3u);
}

TEST(PipelineConfigKeys, ApplyTypedValues) {
    PipelineConfig c;
    apply_config(c, pipeline_config_keys(),
                 parse_config_text("refine.lambda_min = 0.1\ntsdf.resolution = 64\nposegraph.enabled = false\n"
                                   "trajectory.kind = zigzag\nprior.align = median\nseed = 99\n"));
    EXPECT_DOUBLE_EQ(c.refine.lambda_min, 0.1);
    EXPECT_EQ(c.tsdf.resolution, 64);
    EXPECT_FALSE(c.posegraph);
    EXPECT_EQ(c.trajectory.kind, TrajectoryKind::zigzag);
    EXPECT_EQ(c.prior.align, "median");
    EXPECT_EQ(c.seed, 99u);
}

TEST(PipelineConfigKeys, UnknownKeysAndBadValuesAreErrors) {
    PipelineConfig c;
    try {
        apply_config(c, pipeline_config_keys(), parse_config_text("seed = 1\nrefine.lambda = 0.1\n"), "x.cfg");
        FAIL() << "unknown key accepted";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("refine.lambda"), std::string::npos);
    }
    EXPECT_THROW(apply_config(c, pipeline_config_keys(), parse_config_text("tsdf.resolution = 1.5\n")), ParseError);
    EXPECT_THROW(apply_config(c, pipeline_config_keys(), parse_config_text("refine.tol = fast\n")), ParseError);
    EXPECT_THROW(apply_config(c, pipeline_config_keys(), parse_config_text("posegraph.enabled = maybe\n")), ParseError);
    EXPECT_THROW(apply_config(c, pipeline_config_keys(), parse_config_text("trajectory.kind = spiral\n")), ParseError);
}

TEST(PipelineConfigKeys, DumpRoundTripsEveryKey) {
    PipelineConfig c;
    c.refine.eps = 0.123456789012345;
    c.lights.external = 2;
    c.trajectory.kind = TrajectoryKind::square;
    c.output = "results";
    const std::string text = dump_config(c, pipeline_config_keys());
    PipelineConfig back;
    apply_config(back, pipeline_config_keys(), parse_config_text(text));
    EXPECT_EQ(dump_config(back, pipeline_config_keys(), false), dump_config(c, pipeline_config_keys(), false));
    EXPECT_EQ(back.refine.eps, c.refine.eps);

    std::set<std::string> keys;
    for (const auto& k : pipeline_config_keys()) {
        EXPECT_TRUE(keys.insert(k.key).second) << "duplicate key " << k.key;
        EXPECT_FALSE(k.doc.empty()) << k.key;
        EXPECT_TRUE(k.key.find('.') != std::string::npos || k.key == "seed") << k.key;
    }
}

TEST(PipelineConfigKeys, DefaultsValidateAndRangesAreChecked) {
    EXPECT_NO_THROW(PipelineConfig{}.validate());
    auto rejects = [](const std::string& text) {
        PipelineConfig c;
        apply_config(c, pipeline_config_keys(), parse_config_text(text));
        EXPECT_THROW(c.validate(), InputError) << text;
    };
    rejects("refine.lambda_min = 0\n");
    rejects("refine.lambda_max = 1\n");
    rejects("lights.active = 2\n");
    rejects("lights.count = 9\n");
    rejects("refine.mode = fancy\n");
    rejects("tsdf.resolution = 4\n");
    rejects("eval.max_incidence_deg = 95\n");
    rejects("trajectory.stops = 40\n");
}

TEST(PipelineConfigKeys, LoadFromFile) {
    const auto path = (std::filesystem::temp_directory_path() / "mvps_test.cfg").string();
    {
        std::ofstream os(path);
        os << "# small run\ntsdf.resolution = 96\nlights.active = 6\n";
    }
    const PipelineConfig c = load_pipeline_config(path);
    EXPECT_EQ(c.tsdf.resolution, 96);
    EXPECT_EQ(c.lights.active, 6);
    std::filesystem::remove(path);
    EXPECT_THROW(load_pipeline_config(path), IoError);
}
