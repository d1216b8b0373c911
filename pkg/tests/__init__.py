"""
EssenceKit 测试模块
"""
