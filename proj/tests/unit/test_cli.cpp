#include <doctest.h>

#include <cstdio>
#include <string>

#include "bt/errors.h"
#include "bt/io.h"

using namespace bt;

TEST_SUITE("cli") {

TEST_CASE("format_double is lossless and stable") {
    for (double v : {0.1, 1.0 / 3.0, -2.5e17, 1e-300, 0.009330702443380648,
                     0.0, -0.0, 123456789.123456789}) {
        CHECK(std::stod(format_double(v)) == v);
    }
    CHECK(format_double(1.0) == "1");
    CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("fnv1a64 matches the published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
    CHECK(hash_hex("") == "cbf29ce484222325");
    CHECK(hash_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("measurement csv layout and sidecar") {
    Measurement m;
    m.times = {0.0, 0.25};
    m.y = Eigen::MatrixXcd(2, 2);
    m.y << cd(1.0, -2.0), cd(0.5, 0.0), cd(0.0, 3.0), cd(-1.0, 1.0);
    m.seq_kind = "ninety";
    m.taup = 1e-3;
    m.tau = 0.0;
    m.sigma = 0.0;
    m.seed = 7;

    const std::string want = "t,coil,re,im\n"
                             "0,0,1,-2\n"
                             "0,1,0.5,0\n"
                             "0.25,0,0,3\n"
                             "0.25,1,-1,1\n";
    CHECK(measurement_csv(m) == want);

    nlohmann::json side = measurement_sidecar(m);
    CHECK(side["kind"] == "ninety");
    CHECK(side["nsamples"] == 2);
    CHECK(side["ncoils"] == 2);
    CHECK(side["seed"] == 7);
}

TEST_CASE("grid-indexed csv writers") {
    Grid g = Grid::make(1, {4, 1, 1}, {0.02, 1.0, 1.0});

    VecXcd xhat(4);
    xhat << cd(1, 0), cd(0, 2), cd(3, 0), cd(0, -4);
    // mode layout follows the usual DFT order: 0, 1, -2, -1
    const std::string spec = "m0,m1,m2,re,im\n"
                             "0,0,0,1,0\n"
                             "1,0,0,0,2\n"
                             "-2,0,0,3,0\n"
                             "-1,0,0,0,-4\n";
    CHECK(spectral_csv(xhat, g) == spec);
    CHECK_THROWS_AS(spectral_csv(VecXcd::Zero(3), g), ConfigError);

    VecXd f(4);
    f << 1.0, 2.0, 3.0, 4.0;
    std::string fc = field_csv(g, f);
    CHECK(fc.substr(0, 13) == "index,x,re,im");
    CHECK(fc.find("0,0.0025,1,0\n") != std::string::npos);
    VecXd wrong = VecXd::Zero(5);
    CHECK_THROWS_AS(field_csv(g, wrong), ConfigError);

    std::vector<MagState> traj(2);
    for (auto& st : traj) {
        st.Mperp = VecXcd::Zero(4);
        st.mz = VecXcd::Ones(4);
    }
    traj[0].t = 0.0;
    traj[1].t = 0.1;
    std::string tc = trajectory_csv(traj, g);
    int rows = 0;
    for (char ch : tc)
        if (ch == '\n') ++rows;
    CHECK(rows == 1 + 2 * 4);

    std::vector<NewtonIterate> hist(1);
    hist[0].n = 0;
    hist[0].residual = 0.5;
    hist[0].error_to_truth = 0.25;
    hist[0].step_norm = 0.1;
    CHECK(newton_csv(hist) == "n,residual,error_to_truth,step_norm\n"
                              "0,0.5,0.25,0.1\n");
}

TEST_CASE("json files round trip; malformed input is a config error") {
    const std::string path = "test_cli_tmp.json";
    nlohmann::json j{{"name", "case"}, {"values", {1.0, 2.5}}, {"n", 3}};
    write_json_file(path, j);
    nlohmann::json back = read_json_file(path);
    CHECK(back == j);
    // identical content -> identical bytes -> identical hash
    CHECK(hash_hex(read_text_file(path)) == hash_hex(read_text_file(path)));

    write_text_file(path, "{\"broken\": [1, 2,\n");
    CHECK_THROWS_AS(read_json_file(path), ConfigError);
    CHECK_THROWS_WITH_AS(read_json_file(path),
                         doctest::Contains("json parse error"), ConfigError);
    std::remove(path.c_str());

    CHECK_THROWS_AS(read_text_file("does_not_exist_7731.json"), ConfigError);
}

TEST_CASE("certificate json carries all condition flags") {
    SpectralCertificate c;
    c.lambda_perp = {cd(1.0, 0.5)};
    c.lambda_z = {2.0};
    c.det_values = {0.3};
    c.sigma_min = 1e-4;
    c.spacetime_sep = c.assmperp = c.det_ell = c.muIell = true;
    c.pass = true;
    nlohmann::json j = certificate_json(c);
    CHECK(j["pass"] == true);
    CHECK(j["sigma_min"] == 1e-4);
    CHECK(j["conditions"]["spacetime_sep"] == true);
    CHECK(j["conditions"]["muIell"] == true);
    CHECK(j["lambda_perp"][0]["re"] == 1.0);
}

} // TEST_SUITE
