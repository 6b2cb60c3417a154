#include "xformer/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <Eigen/Dense>

namespace xf {

namespace {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

Points to_points(const Tensor& t, const char* what) {
    if (t.rank() != 2 || t.dim(1) != 3) throw DimensionError(std::string(what) + ": expected N×3, got " + shape_str(t.shape()));
    Points p(static_cast<Eigen::Index>(t.dim(0)), 3);
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (int c = 0; c < 3; ++c) p(static_cast<Eigen::Index>(i), c) = t.at(i, static_cast<std::size_t>(c));
    return p;
}

Tensor to_tensor(const Points& p) {
    std::vector<double> v(static_cast<std::size_t>(p.size()));
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(i * 3 + c)] = p(i, c);
    return Tensor::from({static_cast<std::size_t>(p.rows()), 3}, std::move(v));
}

void check_pair(const char* what, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double mean_distance(const Points& a, const Points& b) { return (a - b).rowwise().norm().mean(); }

}  // namespace

EvalProtocol EvalProtocol::h36m_14_of_17() { return {{0, 1, 2, 3, 4, 5, 6, 10, 11, 12, 13, 14, 15, 16}, 0}; }

EvalProtocol EvalProtocol::all_joints(std::size_t root) { return {{}, root}; }

Tensor EvalProtocol::select(const Tensor& joints) const {
    if (subset.empty()) return joints;
    std::vector<double> v;
    for (auto i : subset) {
        if (i >= joints.dim(0))
            throw DimensionError("evaluation subset index " + std::to_string(i) + " beyond " + std::to_string(joints.dim(0)) + " joints");
        for (std::size_t c = 0; c < joints.dim(1); ++c) v.push_back(joints.at(i, c));
    }
    return Tensor::from({subset.size(), joints.dim(1)}, std::move(v));
}

double mpjpe(const Tensor& pred, const Tensor& gt, std::size_t root) {
    check_pair("mpjpe", pred, gt);
    Points p = to_points(pred, "mpjpe"), g = to_points(gt, "mpjpe");
    if (root >= static_cast<std::size_t>(p.rows())) throw DimensionError("mpjpe: root index out of range");
    const Eigen::RowVector3d rp = p.row(static_cast<Eigen::Index>(root)), rg = g.row(static_cast<Eigen::Index>(root));
    p.rowwise() -= rp;
    g.rowwise() -= rg;
    return mean_distance(p, g);
}

Tensor procrustes_align(const Tensor& x, const Tensor& y) {
    check_pair("procrustes_align", x, y);
    const Points px = to_points(x, "procrustes_align"), py = to_points(y, "procrustes_align");
    const Eigen::RowVector3d mx = px.colwise().mean(), my = py.colwise().mean();
    const Points xc = px.rowwise() - mx, yc = py.rowwise() - my;

    const Eigen::JacobiSVD<Eigen::MatrixXd> spread(xc);
    const auto sv = spread.singularValues();
    if (sv.size() < 2 || !(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0))
        throw AlignmentError("procrustes_align: source points are degenerate (rank < 2)");

    const Eigen::Matrix3d cov = yc.transpose() * xc;
    const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    const Eigen::Matrix3d r = svd.matrixU() * d * svd.matrixV().transpose();
    const double s = (svd.singularValues().asDiagonal() * d).trace() / xc.squaredNorm();
    const Eigen::RowVector3d t = my - s * (r * mx.transpose()).transpose();
    Points out = (s * (r * px.transpose())).transpose();
    out.rowwise() += t;
    return to_tensor(out);
}

double pa_mpjpe(const Tensor& pred, const Tensor& gt) {
    return mean_distance(to_points(procrustes_align(pred, gt), "pa_mpjpe"), to_points(gt, "pa_mpjpe"));
}

double pve(const Tensor& vertices_pred, const Tensor& root_pred, const Tensor& vertices_gt, const Tensor& root_gt) {
    check_pair("pve", vertices_pred, vertices_gt);
    if (root_pred.numel() != 3 || root_gt.numel() != 3) throw DimensionError("pve: roots must have three coordinates");
    Points p = to_points(vertices_pred, "pve"), g = to_points(vertices_gt, "pve");
    p.rowwise() -= Eigen::RowVector3d(root_pred.at(0), root_pred.at(1), root_pred.at(2));
    g.rowwise() -= Eigen::RowVector3d(root_gt.at(0), root_gt.at(1), root_gt.at(2));
    return mean_distance(p, g);
}

SampleMetrics evaluate_sample(const Tensor& joints_pred, const Tensor& joints_gt, const Tensor& vertices_pred,
                              const Tensor& vertices_gt, const EvalProtocol& protocol) {
    const Tensor jp = protocol.select(joints_pred), jg = protocol.select(joints_gt);
    SampleMetrics m;
    m.mpjpe = mpjpe(jp, jg, protocol.root);
    m.pa_mpjpe = pa_mpjpe(jp, jg);
    auto root = [&](const Tensor& j) {
        return Tensor::from({3}, {j.at(protocol.root, 0), j.at(protocol.root, 1), j.at(protocol.root, 2)});
    };
    m.pve = pve(vertices_pred, root(jp), vertices_gt, root(jg));
    return m;
}

void EvalRow::finalize() {
    mpjpe = pa_mpjpe = pve = 0.0;
    if (samples.empty()) return;
    for (const auto& s : samples) {
        mpjpe += s.mpjpe;
        pa_mpjpe += s.pa_mpjpe;
        pve += s.pve;
    }
    const auto n = static_cast<double>(samples.size());
    mpjpe /= n;
    pa_mpjpe /= n;
    pve /= n;
}

const EvalRow& EvalReport::row(const std::string& name) const {
    for (const auto& r : rows)
        if (r.name == name) return r;
    throw ContractError("evaluation report has no row '" + name + "'");
}

std::string EvalReport::csv() const {
    std::ostringstream os;
    os << "branch,samples,mpjpe,pa_mpjpe,pve\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g\n", r.name.c_str(), r.samples.size(), r.mpjpe,
                      r.pa_mpjpe, r.pve);
        os << buf;
    }
    return os.str();
}

std::string EvalReport::per_sample_csv() const {
    std::ostringstream os;
    os << "branch,sample,mpjpe,pa_mpjpe,pve\n";
    char buf[128];
    for (const auto& r : rows)
        for (std::size_t i = 0; i < r.samples.size(); ++i) {
            const auto& s = r.samples[i];
            std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g\n", r.name.c_str(), i, s.mpjpe, s.pa_mpjpe, s.pve);
            os << buf;
        }
    return os.str();
}

std::string EvalReport::summary() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %8s %12s %12s %12s\n", "branch", "samples", "MPJPE", "PA-MPJPE", "PVE");
    os << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-10s %8zu %12.6f %12.6f %12.6f\n", r.name.c_str(), r.samples.size(), r.mpjpe,
                      r.pa_mpjpe, r.pve);
        os << buf;
    }
    return os.str();
}

}  // namespace xf
