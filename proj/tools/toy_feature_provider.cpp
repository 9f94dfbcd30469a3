// Reference implementation of the external feature provider protocol:
//   toy_feature_provider <checkpoint.mkt> <samples.fts> <features.fts>
// Runs the toy encoder stored in the checkpoint on the sample rows and writes
// the features with the samples' digest.
#include <exception>
#include <iostream>

#include "tapmerge/tap.hpp"
#include "tapmerge/tensor_store.hpp"
#include "tapmerge/toy_bench.hpp"

int main(int argc, char** argv) {
    if (argc != 4) {
        std::cerr << "usage: toy_feature_provider <checkpoint> <samples> <out_features>\n";
        return 1;
    }
    try {
        using namespace tapmerge;
        const WeightMap weights = load_checkpoint(argv[1]);
        const FeatureSet samples = load_features(argv[2], "samples");
        Eigen::MatrixXd x(static_cast<Eigen::Index>(samples.rows), static_cast<Eigen::Index>(samples.cols));
        for (std::size_t r = 0; r < samples.rows; ++r)
            for (std::size_t c = 0; c < samples.cols; ++c)
                x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = samples.data[r * samples.cols + c];
        save_features(toy::encoder_forward(weights, x, "features", samples.sample_digest), argv[3]);
    } catch (const std::exception& e) {
        std::cerr << "toy_feature_provider: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
