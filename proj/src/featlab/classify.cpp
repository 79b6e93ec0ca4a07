#include "featlab/classify.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>

#include "common/error.hpp"

namespace tsyn::feat {

ClassifierKind classifier_kind_from_string(const std::string& s) {
    if (s == "linear_hinge") return ClassifierKind::LinearHinge;
    if (s == "nearest_neighbor") return ClassifierKind::NearestNeighbor;
    fail_config("unknown classifier kind '" + s + "'");
}

namespace {

json split_to_json(const SplitReport& r) {
    return json{{"precision", r.precision},
                {"recall", r.recall},
                {"macro_precision", r.macro_precision},
                {"macro_recall", r.macro_recall},
                {"confusion", r.confusion}};
}

}  // namespace

json ClassifierReport::to_json() const {
    return json{{"classes", class_names},
                {"train", split_to_json(train)},
                {"test", split_to_json(test)},
                {"split", split_descriptor}};
}

int OriginClassifier::predict(const FeatureVector& f) const {
    std::array<double, FeatureVector::dim> x;
    for (int i = 0; i < FeatureVector::dim; ++i) x[i] = (f.values[i] - feat_mean[i]) / feat_std[i];
    if (kind == ClassifierKind::LinearHinge) {
        int best = 0;
        double best_score = -1e300;
        for (size_t c = 0; c < weights.size(); ++c) {
            double s = weights[c][FeatureVector::dim];  // bias
            for (int i = 0; i < FeatureVector::dim; ++i) s += weights[c][i] * x[i];
            if (s > best_score) {
                best_score = s;
                best = static_cast<int>(c);
            }
        }
        return best;
    }
    int best = 0;
    double best_d = 1e300;
    for (size_t p = 0; p < train_points.size(); ++p) {
        double d = 0;
        for (int i = 0; i < FeatureVector::dim; ++i) {
            const double diff = train_points[p][i] - x[i];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = train_labels[p];
        }
    }
    return best;
}

namespace {

SplitReport score_split(const OriginClassifier& clf, const std::vector<FeatureVector>& features,
                        const std::vector<int>& y, const std::vector<size_t>& idx, int n_classes) {
    SplitReport r;
    r.confusion.assign(n_classes, std::vector<int>(n_classes, 0));
    for (size_t i : idx) r.confusion[static_cast<size_t>(y[i])][static_cast<size_t>(clf.predict(features[i]))]++;
    r.precision.assign(n_classes, 0.0);
    r.recall.assign(n_classes, 0.0);
    for (int c = 0; c < n_classes; ++c) {
        int tp = r.confusion[c][c], fp = 0, fn = 0;
        for (int o = 0; o < n_classes; ++o) {
            if (o != c) {
                fp += r.confusion[o][c];
                fn += r.confusion[c][o];
            }
        }
        r.precision[c] = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        r.recall[c] = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        r.macro_precision += r.precision[c];
        r.macro_recall += r.recall[c];
    }
    r.macro_precision /= n_classes;
    r.macro_recall /= n_classes;
    return r;
}

}  // namespace

OriginStudyResult train_origin_classifier(const std::vector<FeatureVector>& features,
                                          const std::vector<std::string>& labels, ClassifierKind kind,
                                          std::uint64_t seed, double test_fraction) {
    require(features.size() == labels.size(), ErrorKind::Runtime, "classifier: features/labels size mismatch");

    std::map<std::string, int> class_ids;
    for (const auto& l : labels) class_ids.emplace(l, 0);
    require(class_ids.size() >= 2, ErrorKind::Runtime, "classifier: need at least 2 classes");
    OriginStudyResult out;
    for (auto& [name, id] : class_ids) {
        id = static_cast<int>(out.classifier.class_names.size());
        out.classifier.class_names.push_back(name);
    }
    const int n_classes = static_cast<int>(class_ids.size());
    std::vector<int> y(labels.size());
    std::vector<std::vector<size_t>> per_class(n_classes);
    for (size_t i = 0; i < labels.size(); ++i) {
        y[i] = class_ids[labels[i]];
        per_class[static_cast<size_t>(y[i])].push_back(i);
    }
    for (int c = 0; c < n_classes; ++c)
        require(per_class[c].size() >= 2, ErrorKind::Runtime,
                "classifier: every class needs at least 2 samples");

    // deterministic stratified split
    Rng rng(derive_seed(seed, "origin-split"));
    std::vector<size_t> train_idx, test_idx;
    for (int c = 0; c < n_classes; ++c) {
        auto idx = per_class[c];
        for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(0, static_cast<int>(i) - 1)]);
        size_t n_test = static_cast<size_t>(std::floor(test_fraction * static_cast<double>(idx.size())));
        n_test = std::min(n_test, idx.size() - 1);
        for (size_t i = 0; i < idx.size(); ++i)
            (i < n_test ? test_idx : train_idx).push_back(idx[i]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    // z-score on the training split
    OriginClassifier& clf = out.classifier;
    clf.kind = kind;
    for (int d = 0; d < FeatureVector::dim; ++d) {
        double mean = 0;
        for (size_t i : train_idx) mean += features[i].values[d];
        mean /= static_cast<double>(train_idx.size());
        double var = 0;
        for (size_t i : train_idx) var += (features[i].values[d] - mean) * (features[i].values[d] - mean);
        var /= static_cast<double>(train_idx.size());
        clf.feat_mean[d] = mean;
        clf.feat_std[d] = var > 1e-18 ? std::sqrt(var) : 1.0;
    }
    auto standardized = [&](size_t i) {
        std::array<double, FeatureVector::dim> x;
        for (int d = 0; d < FeatureVector::dim; ++d)
            x[d] = (features[i].values[d] - clf.feat_mean[d]) / clf.feat_std[d];
        return x;
    };

    if (kind == ClassifierKind::NearestNeighbor) {
        for (size_t i : train_idx) {
            clf.train_points.push_back(standardized(i));
            clf.train_labels.push_back(y[i]);
        }
    } else {
        const int D = FeatureVector::dim;
        clf.weights.assign(static_cast<size_t>(n_classes), std::vector<double>(D + 1, 0.0));
        const double lr = 0.1;
        const double l2 = 1e-3;
        const int epochs = 500;
        for (int c = 0; c < n_classes; ++c) {
            auto& w = clf.weights[static_cast<size_t>(c)];
            for (int e = 0; e < epochs; ++e) {
                std::vector<double> grad(D + 1, 0.0);
                for (size_t i : train_idx) {
                    const auto x = standardized(i);
                    const double t = y[i] == c ? 1.0 : -1.0;
                    double s = w[D];
                    for (int d = 0; d < D; ++d) s += w[d] * x[d];
                    if (t * s < 1.0) {
                        for (int d = 0; d < D; ++d) grad[d] -= t * x[d];
                        grad[D] -= t;
                    }
                }
                const double inv_n = 1.0 / static_cast<double>(train_idx.size());
                for (int d = 0; d < D; ++d) w[d] -= lr * (grad[d] * inv_n + l2 * w[d]);
                w[D] -= lr * grad[D] * inv_n;
            }
        }
    }

    out.report.class_names = clf.class_names;
    out.report.train = score_split(clf, features, y, train_idx, n_classes);
    out.report.test = score_split(clf, features, y, test_idx, n_classes);
    out.report.split_descriptor = "stratified " + std::to_string(100 - static_cast<int>(test_fraction * 100)) +
                                  "/" + std::to_string(static_cast<int>(test_fraction * 100)) + ", seed " +
                                  std::to_string(seed);
    return out;
}

std::vector<std::array<double, 2>> embed_2d(const std::vector<std::vector<double>>& rows) {
    require(rows.size() >= 2, ErrorKind::Runtime, "embed_2d: need at least 2 samples");
    const int n = static_cast<int>(rows.size());
    const int d = static_cast<int>(rows[0].size());
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i) {
        require(static_cast<int>(rows[i].size()) == d, ErrorKind::Runtime, "embed_2d: ragged rows");
        for (int j = 0; j < d; ++j) X(i, j) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
    const Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    Eigen::MatrixXd cov = X.transpose() * X / std::max(1, n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    // eigenvalues ascending: take the last two columns
    std::vector<std::array<double, 2>> out(static_cast<size_t>(n));
    for (int comp = 0; comp < 2; ++comp) {
        if (comp >= d) {
            for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)][static_cast<size_t>(comp)] = 0.0;
            continue;
        }
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - comp);
        // sign convention: largest-magnitude loading positive
        int arg = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
        if (v(arg) < 0) v = -v;
        Eigen::VectorXd proj = X * v;
        for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)][static_cast<size_t>(comp)] = proj(i);
    }
    return out;
}

std::vector<std::array<double, 2>> embed_2d_features(const std::vector<FeatureVector>& features,
                                                     bool standardize) {
    std::vector<std::vector<double>> rows;
    rows.reserve(features.size());
    for (const auto& f : features) rows.emplace_back(f.values.begin(), f.values.end());
    if (standardize && !rows.empty()) {
        const int d = FeatureVector::dim;
        for (int j = 0; j < d; ++j) {
            double mean = 0;
            for (const auto& r : rows) mean += r[static_cast<size_t>(j)];
            mean /= static_cast<double>(rows.size());
            double var = 0;
            for (const auto& r : rows) var += (r[static_cast<size_t>(j)] - mean) * (r[static_cast<size_t>(j)] - mean);
            var /= static_cast<double>(rows.size());
            const double inv = var > 1e-18 ? 1.0 / std::sqrt(var) : 1.0;
            for (auto& r : rows) r[static_cast<size_t>(j)] = (r[static_cast<size_t>(j)] - mean) * inv;
        }
    }
    return embed_2d(rows);
}

}  // namespace tsyn::feat
