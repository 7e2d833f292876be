"""
合成室内世界模拟：世界生成、RGBD 渲染、数据采样与语义地图
"""
