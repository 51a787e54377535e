"""sella: a desk-scale LLM recommendation pipeline that injects projected
collaborative-knowledge tokens into a miniature language model's prompts,
trained in three stages with a CTR evaluation and ablation harness."""

__version__ = "0.1.0"
