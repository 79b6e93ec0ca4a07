#pragma once

#include <string>
#include <vector>

#include "common/jsonio.hpp"
#include "common/rng.hpp"
#include "featlab/features.hpp"

namespace tsyn::feat {

enum class ClassifierKind { LinearHinge, NearestNeighbor };
ClassifierKind classifier_kind_from_string(const std::string& s);

struct SplitReport {
    std::vector<double> precision, recall;           // per class
    double macro_precision = 0, macro_recall = 0;
    std::vector<std::vector<int>> confusion;         // rows: true class, cols: predicted
};

struct ClassifierReport {
    std::vector<std::string> class_names;
    SplitReport train, test;
    std::string split_descriptor;
    json to_json() const;
};

// One-vs-rest hinge-loss linear model (full-batch subgradient descent) or
// 1-NN, both in z-scored feature space.
class OriginClassifier {
public:
    int predict(const FeatureVector& f) const;

    ClassifierKind kind = ClassifierKind::LinearHinge;
    std::vector<std::string> class_names;
    std::array<double, FeatureVector::dim> feat_mean{}, feat_std{};
    // linear: per class, dim weights + bias
    std::vector<std::vector<double>> weights;
    // 1-NN: standardized training points + labels
    std::vector<std::array<double, FeatureVector::dim>> train_points;
    std::vector<int> train_labels;
};

struct OriginStudyResult {
    OriginClassifier classifier;
    ClassifierReport report;
};

OriginStudyResult train_origin_classifier(const std::vector<FeatureVector>& features,
                                          const std::vector<std::string>& labels, ClassifierKind kind,
                                          std::uint64_t seed, double test_fraction = 0.3);

// Principal-component projection to 2D (centered, no per-feature scaling).
std::vector<std::array<double, 2>> embed_2d(const std::vector<std::vector<double>>& rows);
std::vector<std::array<double, 2>> embed_2d_features(const std::vector<FeatureVector>& features,
                                                     bool standardize);

}  // namespace tsyn::feat
