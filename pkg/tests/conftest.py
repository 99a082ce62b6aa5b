from xmask3d.pipeline import tune_allocator

tune_allocator()
