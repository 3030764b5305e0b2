use super::{Activation, DenseLayer, EmbeddingTable, ModelError, Pooling};

/// SparseLengthsSum-style lookup and pooling for one feature instance.
///
/// Sum pooling accumulates rows in the order the indices are given, so the
/// result is reproducible bit for bit. Concat pooling returns `dim * K`
/// values regardless of the table's declared concat width.
pub fn sls_pool(table: &EmbeddingTable, indices: &[u32]) -> Result<Vec<f32>, ModelError> {
    let m = table.dim();
    let width = match table.meta.pooling {
        Pooling::Sum => m,
        Pooling::Concat { .. } => m * indices.len(),
    };
    let mut out = vec![0.0; width];
    sls_pool_into(table, indices, &mut out)?;
    Ok(out)
}

/// Like [`sls_pool`] but writes into `out`, which must already have the
/// pooled width. Sum pooling adds onto whatever `out` holds.
pub fn sls_pool_into(
    table: &EmbeddingTable,
    indices: &[u32],
    out: &mut [f32],
) -> Result<(), ModelError> {
    let m = table.dim();
    let n = table.num_rows();
    for &ix in indices {
        if ix as u64 >= n {
            return Err(ModelError::IndexOutOfRange {
                table_id: table.table_id(),
                index: ix as u64,
                num_rows: n,
            });
        }
    }
    match table.meta.pooling {
        Pooling::Sum => {
            if out.len() != m {
                return Err(ModelError::DimensionMismatch {
                    context: format!("table {} pooled output", table.table_id()),
                    expected: m,
                    actual: out.len(),
                });
            }
            for &ix in indices {
                let row = table.row(ix as usize);
                for (o, v) in out.iter_mut().zip(row) {
                    *o += *v;
                }
            }
        }
        Pooling::Concat { .. } => {
            if out.len() != m * indices.len() {
                return Err(ModelError::DimensionMismatch {
                    context: format!("table {} concat output", table.table_id()),
                    expected: m * indices.len(),
                    actual: out.len(),
                });
            }
            for (chunk, &ix) in out.chunks_exact_mut(m).zip(indices) {
                chunk.copy_from_slice(table.row(ix as usize));
            }
        }
    }
    Ok(())
}

pub fn fc_forward(layer: &DenseLayer, input: &[f32]) -> Result<Vec<f32>, ModelError> {
    let mut out = vec![0.0; layer.out_dim()];
    fc_forward_into(layer, input, &mut out)?;
    Ok(out)
}

pub fn fc_forward_into(layer: &DenseLayer, input: &[f32], out: &mut [f32]) -> Result<(), ModelError> {
    let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
    if input.len() != n_in {
        return Err(ModelError::DimensionMismatch {
            context: format!("layer {} input", layer.meta.layer_id),
            expected: n_in,
            actual: input.len(),
        });
    }
    if out.len() != n_out {
        return Err(ModelError::DimensionMismatch {
            context: format!("layer {} output", layer.meta.layer_id),
            expected: n_out,
            actual: out.len(),
        });
    }
    for (o, (row, b)) in out
        .iter_mut()
        .zip(layer.weight.chunks_exact(n_in).zip(&layer.bias))
    {
        let acc: f32 = row.iter().zip(input).map(|(w, x)| w * x).sum();
        let z = acc + b;
        *o = match layer.meta.activation {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        };
    }
    Ok(())
}
