#include "xformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "xformer/ops.hpp"

namespace xf {

namespace {

std::size_t term_index(const std::string& term) {
    const auto& names = loss_term_names();
    const auto it = std::find(names.begin(), names.end(), term);
    if (it == names.end()) throw ContractError("unknown loss term '" + term + "'");
    return static_cast<std::size_t>(it - names.begin());
}

void same_shape(const char* what, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor point_l1(const char* what, const Tensor& pred, const Tensor& gt) {
    same_shape(what, pred, gt);
    if (pred.rank() != 2) throw DimensionError(std::string(what) + ": expected N×C points");
    return scale(sum(abs(sub(pred, gt))), 1.0 / static_cast<double>(pred.dim(0)));
}

}  // namespace

Tensor loss_map(const HeatmapSet& pred, const HeatmapSet& gt, const std::vector<double>& weights) {
    same_shape("loss_map heatmaps", pred.heatmaps, gt.heatmaps);
    same_shape("loss_map offsets", pred.offsets, gt.offsets);
    const std::size_t k = pred.keypoints(), hw = pred.height() * pred.width();
    if (weights.size() != k) throw DimensionError("loss_map: " + std::to_string(weights.size()) + " weights for " +
                                                  std::to_string(k) + " keypoints");
    std::vector<double> wh(k * hw), wo(k * 2 * hw);
    for (std::size_t j = 0; j < k; ++j) {
        if (weights[j] < 0.0) throw ContractError("loss_map: negative keypoint weight");
        std::fill_n(wh.begin() + static_cast<std::ptrdiff_t>(j * hw), hw, weights[j] / static_cast<double>(k * hw));
        std::fill_n(wo.begin() + static_cast<std::ptrdiff_t>(j * 2 * hw), 2 * hw,
                    weights[j] / static_cast<double>(k * 2 * hw));
    }
    Tensor lh = sum(mul(abs(sub(pred.heatmaps, gt.heatmaps)), Tensor::from(pred.heatmaps.shape(), std::move(wh))));
    Tensor lo = sum(mul(abs(sub(pred.offsets, gt.offsets)), Tensor::from(pred.offsets.shape(), std::move(wo))));
    return add(lh, lo);
}

Tensor loss_vertex(const Tensor& pred, const Tensor& gt) { return point_l1("loss_vertex", pred, gt); }

Tensor loss_joint(const Tensor& pred, const Tensor& gt) { return point_l1("loss_joint", pred, gt); }

Tensor loss_joint_reg(const Tensor& vertices, const Tensor& joints_gt, const JointRegressor& reg) {
    return point_l1("loss_joint_reg", regress_joints(vertices, reg), joints_gt);
}

Tensor loss_reproj(const Tensor& joints3d, const WeakPerspectiveCamera& cam, const Tensor& joints2d_gt,
                   const std::vector<bool>& visible) {
    Tensor proj = project_weak_perspective(joints3d, cam);
    same_shape("loss_reproj", proj, joints2d_gt);
    const std::size_t k = proj.dim(0);
    if (visible.size() != k) throw DimensionError("loss_reproj: visibility length mismatch");
    const auto n_vis = static_cast<double>(std::count(visible.begin(), visible.end(), true));
    std::vector<double> mask(k * 2, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        if (visible[i]) mask[i * 2] = mask[i * 2 + 1] = 1.0 / (2.0 * n_vis);
    return sum(mul(abs(sub(proj, joints2d_gt)), Tensor::from({k, 2}, std::move(mask))));
}

Tensor loss_consistency(const std::optional<Tensor>& mha, const Tensor& mlp) {
    if (!mha) throw ContractError("loss_consistency: attended keypoint feature absent (image modality missing)");
    same_shape("loss_consistency", *mha, mlp);
    return scale(frobenius_norm(sub(*mha, mlp)), 1.0 / std::sqrt(static_cast<double>(mha->dim(0))));
}

double LossWeights::get(const std::string& term) const { return values[term_index(term)]; }

void LossWeights::set(const std::string& term, double w) {
    if (!(w >= 0.0)) throw ContractError("loss weight for '" + term + "' must be nonnegative");
    values[term_index(term)] = w;
}

std::vector<std::string> active_terms(DatasetType type, const LossOptions& o) {
    std::vector<std::string> t;
    auto branch = [&](const char* prefix, bool with_3d, bool with_proj) {
        const std::string p(prefix);
        if (with_3d) {
            t.push_back(p + "_V");
            t.push_back(p + "_J");
            t.push_back(p + "_Jreg");
        }
        if (with_proj) t.push_back(p + "_Jproj");
    };
    switch (type) {
        case DatasetType::image_3d:
        case DatasetType::image_pseudo3d:
        case DatasetType::image_2d_only: {
            const bool with_3d = type != DatasetType::image_2d_only;
            if (o.map_loss && o.keypoint_branch) t.push_back("map");
            if (o.keypoint_branch) branch("kp", with_3d, true);
            if (o.image_branch) branch("img", with_3d, true);
            if (o.consistency && o.keypoint_branch && o.image_branch) t.push_back("cons");
            break;
        }
        case DatasetType::mocap:
            if (o.keypoint_branch) branch("kp", true, o.mocap_reprojection);
            break;
    }
    return t;
}

bool LossReport::has(const std::string& term) const {
    return std::any_of(terms.begin(), terms.end(), [&](const auto& p) { return p.first == term; });
}

double LossReport::get(const std::string& term) const {
    for (const auto& [n, v] : terms)
        if (n == term) return v;
    throw ContractError("loss term '" + term + "' is not active in this report");
}

std::string LossReport::csv_header() {
    std::string h = "step,tag";
    for (const auto& n : loss_term_names()) h += "," + n;
    return h + ",total";
}

std::string LossReport::csv_row(std::uint64_t step, const std::string& tag) const {
    std::ostringstream os;
    char buf[32];
    os << step << ',' << tag;
    for (const auto& n : loss_term_names()) {
        os << ',';
        if (has(n)) {
            std::snprintf(buf, sizeof buf, "%.10g", get(n));
            os << buf;
        }
    }
    std::snprintf(buf, sizeof buf, "%.10g", total);
    os << ',' << buf;
    return os.str();
}

LossReport total_loss(DatasetType type, const BranchOutputs& out, const LossTargets& tg, const JointRegressor& reg,
                      const LossOptions& options) {
    const std::string tag = dataset_type_name(type);
    if (type == DatasetType::mocap && (out.image || out.heatmaps))
        throw ContractError("mocap sample cannot be scored with image-branch losses");
    auto need = [&](bool ok, const std::string& what) {
        if (!ok) throw ContractError(tag + " sample: loss requires " + what);
    };
    LossReport report;
    Tensor total;
    for (const auto& term : active_terms(type, options)) {
        Tensor value;
        if (term == "map") {
            need(out.heatmaps.has_value(), "predicted heatmaps");
            need(tg.maps.has_value(), "target heatmaps");
            value = loss_map(*out.heatmaps, *tg.maps, tg.map_weights);
        } else if (term == "cons") {
            need(!out.consistency.empty(), "cross-modal consistency pairs");
            for (const auto& pair : out.consistency) {
                Tensor c = loss_consistency(pair.mha, pair.mlp);
                value = value.defined() ? add(value, c) : c;
            }
            value = scale(value, 1.0 / static_cast<double>(out.consistency.size()));
        } else {
            const bool kp = term.rfind("kp_", 0) == 0;
            const auto& pred = kp ? out.keypoint : out.image;
            need(pred.has_value(), std::string(kp ? "keypoint" : "image") + "-branch prediction");
            const std::string kind = term.substr(term.find('_') + 1);
            if (kind == "V") {
                need(tg.vertices.has_value(), "3D vertices");
                value = loss_vertex(pred->full, *tg.vertices);
            } else if (kind == "J") {
                need(tg.joints3d.has_value(), "3D joints");
                value = loss_joint(pred->joints, *tg.joints3d);
            } else if (kind == "Jreg") {
                need(tg.joints3d.has_value(), "3D joints");
                value = loss_joint_reg(pred->full, *tg.joints3d, reg);
            } else {
                need(tg.joints2d.has_value(), "2D joints");
                value = loss_reproj(pred->joints, pred->camera, *tg.joints2d, tg.joints2d_visible);
            }
        }
        report.terms.emplace_back(term, value.item());
        Tensor weighted = scale(value, options.weights.get(term));
        total = total.defined() ? add(total, weighted) : weighted;
    }
    if (!total.defined()) throw ContractError(tag + " sample: no active loss terms");
    report.total_tensor = total;
    report.total = total.item();
    return report;
}

}  // namespace xf
