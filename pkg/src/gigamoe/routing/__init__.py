from .embedding import (RoutingEmbedding, cluster_embeddings, domain_embedding,
                        embedding_text, filter_embedding, read_embedding, routing_embedding,
                        steering_bias, steering_matrix, write_embedding)
from .emissions import EmissionsInput, co2_estimate
from .telemetry import (RoutingTrace, TelemetryReport, assignment_counts, detect_collapse,
                        expert_frequencies, h_sparsity, h_utilization, normalized_entropy,
                        read_traces, telemetry_report, write_traces)
