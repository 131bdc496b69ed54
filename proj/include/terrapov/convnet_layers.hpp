#pragma once

// Forward/backward kernels for the layer types used by the classifier.
// Activations are stored as (channels x pixels) matrices: column p holds every
// channel of pixel p = y * width + x, matching the interleaved RGB tile layout.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace terrapov::convnet {

template<typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template<typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// 3x3 convolution, stride 1, zero padding 1. Kernel rows are output
/// channels; columns are ordered (ky, kx, in_channel).
template<typename Scalar>
struct ConvLayer
{
	Matrix<Scalar> kernel;
	Vector<Scalar> bias;

	int out_channels() const { return static_cast<int>(kernel.rows()); }
	int in_channels() const { return static_cast<int>(kernel.cols() / 9); }
};

template<typename Scalar>
struct DenseLayer
{
	Matrix<Scalar> weight; // out x in
	Vector<Scalar> bias;
};

/// Builds the (9 * C) x (H * W) patch matrix for a C x (H * W) input.
template<typename Scalar>
void im2col(const Matrix<Scalar>& in, int height, int width, Matrix<Scalar>& col)
{
	const Eigen::Index c = in.rows();
	col.setZero(9 * c, static_cast<Eigen::Index>(height) * width);
	for (int y = 0; y < height; ++y) {
		for (int x = 0; x < width; ++x) {
			const Eigen::Index p = y * width + x;
			for (int ky = 0; ky < 3; ++ky) {
				const int sy = y + ky - 1;
				if (sy < 0 || sy >= height)
					continue;
				for (int kx = 0; kx < 3; ++kx) {
					const int sx = x + kx - 1;
					if (sx < 0 || sx >= width)
						continue;
					col.col(p).segment((ky * 3 + kx) * c, c) = in.col(sy * width + sx);
				}
			}
		}
	}
}

/// Scatter-adds a patch-matrix gradient back onto the input grid.
template<typename Scalar>
void col2im(const Matrix<Scalar>& dcol, int channels, int height, int width, Matrix<Scalar>& din)
{
	const Eigen::Index c = channels;
	din.setZero(c, static_cast<Eigen::Index>(height) * width);
	for (int y = 0; y < height; ++y) {
		for (int x = 0; x < width; ++x) {
			const Eigen::Index p = y * width + x;
			for (int ky = 0; ky < 3; ++ky) {
				const int sy = y + ky - 1;
				if (sy < 0 || sy >= height)
					continue;
				for (int kx = 0; kx < 3; ++kx) {
					const int sx = x + kx - 1;
					if (sx < 0 || sx >= width)
						continue;
					din.col(sy * width + sx) += dcol.col(p).segment((ky * 3 + kx) * c, c);
				}
			}
		}
	}
}

/// Pre-activation convolution output; `col` receives the patch matrix for backward.
template<typename Scalar>
Matrix<Scalar> conv_forward(const ConvLayer<Scalar>& layer, const Matrix<Scalar>& in, int height, int width,
                            Matrix<Scalar>& col)
{
	im2col(in, height, width, col);
	Matrix<Scalar> out = layer.kernel * col;
	out.colwise() += layer.bias;
	return out;
}

/// Accumulates kernel/bias gradients into dlayer; returns the input gradient
/// unless `need_input_grad` is false.
template<typename Scalar>
Matrix<Scalar> conv_backward(const ConvLayer<Scalar>& layer, const Matrix<Scalar>& dout, const Matrix<Scalar>& col,
                             int height, int width, ConvLayer<Scalar>& dlayer, bool need_input_grad = true)
{
	dlayer.kernel.noalias() += dout * col.transpose();
	dlayer.bias += dout.rowwise().sum();
	Matrix<Scalar> din;
	if (need_input_grad) {
		const Matrix<Scalar> dcol = layer.kernel.transpose() * dout;
		col2im(dcol, layer.in_channels(), height, width, din);
	}
	return din;
}

template<typename Scalar>
void relu_inplace(Matrix<Scalar>& a)
{
	a = a.cwiseMax(Scalar(0));
}

/// Zeroes gradient entries where the (post-ReLU) activation is not positive.
template<typename Scalar>
void relu_backward_inplace(const Matrix<Scalar>& activation, Matrix<Scalar>& grad)
{
	grad = (activation.array() > Scalar(0)).select(grad, Scalar(0));
}

/// 2x2 max-pool with stride 2 on even-sized grids. `argmax` records, per
/// output entry, the flat input pixel index that won (first wins on ties).
template<typename Scalar>
Matrix<Scalar> maxpool_forward(const Matrix<Scalar>& in, int height, int width, Eigen::MatrixXi& argmax)
{
	const int oh = height / 2, ow = width / 2;
	const Eigen::Index c = in.rows();
	Matrix<Scalar> out(c, static_cast<Eigen::Index>(oh) * ow);
	argmax.resize(c, static_cast<Eigen::Index>(oh) * ow);
	for (int y = 0; y < oh; ++y) {
		for (int x = 0; x < ow; ++x) {
			const Eigen::Index p = y * ow + x;
			const int q[4] = {(2 * y) * width + 2 * x, (2 * y) * width + 2 * x + 1, (2 * y + 1) * width + 2 * x,
			                  (2 * y + 1) * width + 2 * x + 1};
			for (Eigen::Index ch = 0; ch < c; ++ch) {
				int best = q[0];
				Scalar v = in(ch, q[0]);
				for (int k = 1; k < 4; ++k) {
					if (in(ch, q[k]) > v) {
						v = in(ch, q[k]);
						best = q[k];
					}
				}
				out(ch, p) = v;
				argmax(ch, p) = best;
			}
		}
	}
	return out;
}

template<typename Scalar>
Matrix<Scalar> maxpool_backward(const Matrix<Scalar>& dout, const Eigen::MatrixXi& argmax, int height, int width)
{
	Matrix<Scalar> din = Matrix<Scalar>::Zero(dout.rows(), static_cast<Eigen::Index>(height) * width);
	for (Eigen::Index p = 0; p < dout.cols(); ++p)
		for (Eigen::Index ch = 0; ch < dout.rows(); ++ch)
			din(ch, argmax(ch, p)) += dout(ch, p);
	return din;
}

/// Batched affine map: columns of `in` are samples.
template<typename Scalar>
Matrix<Scalar> dense_forward(const DenseLayer<Scalar>& layer, const Matrix<Scalar>& in)
{
	Matrix<Scalar> out = layer.weight * in;
	out.colwise() += layer.bias;
	return out;
}

template<typename Scalar>
Matrix<Scalar> dense_backward(const DenseLayer<Scalar>& layer, const Matrix<Scalar>& in, const Matrix<Scalar>& dout,
                              DenseLayer<Scalar>& dlayer, bool need_input_grad = true)
{
	dlayer.weight.noalias() += dout * in.transpose();
	dlayer.bias += dout.rowwise().sum();
	if (!need_input_grad)
		return {};
	return layer.weight.transpose() * dout;
}

/// Column-wise softmax, computed with the max subtracted.
template<typename Scalar>
Matrix<Scalar> softmax(const Matrix<Scalar>& logits)
{
	Matrix<Scalar> p(logits.rows(), logits.cols());
	for (Eigen::Index j = 0; j < logits.cols(); ++j) {
		const Scalar mx = logits.col(j).maxCoeff();
		p.col(j) = (logits.col(j).array() - mx).exp();
		p.col(j) /= p.col(j).sum();
	}
	return p;
}

/// Mean cross-entropy over the batch; `dlogits` receives its gradient.
template<typename Scalar>
Scalar softmax_cross_entropy(const Matrix<Scalar>& logits, const std::vector<int>& labels, Matrix<Scalar>& dlogits)
{
	const Eigen::Index b = logits.cols();
	Scalar loss = 0;
	dlogits.resize(logits.rows(), b);
	for (Eigen::Index j = 0; j < b; ++j) {
		const Scalar mx = logits.col(j).maxCoeff();
		const Scalar lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
		loss += lse - logits(labels[static_cast<std::size_t>(j)], j);
		dlogits.col(j) = (logits.col(j).array() - lse).exp();
		dlogits(labels[static_cast<std::size_t>(j)], j) -= Scalar(1);
	}
	dlogits /= static_cast<Scalar>(b);
	return loss / static_cast<Scalar>(b);
}

} // namespace terrapov::convnet
